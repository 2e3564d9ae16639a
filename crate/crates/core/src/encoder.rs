//! Frozen toy text/image encoders and the prompt-conditioned classifier.
//!
//! Text path for class `j` with prompt `p` (b×d):
//!
//! ```text
//! t_j = class_token_j · token_embed                       (e → d)
//! q_j = (t_j + Σ_i gate_j[i] ⊙ p[i]) / (b + 1)            (pool over b+1 tokens)
//! f_j = normalize(text_proj · q_j)
//! ```
//!
//! The per-class, per-position gates play the part that attention plays in a
//! real text encoder: they let a prompt move each class feature differently.
//! With a zero prompt the pooled token is the scaled class token alone.
//!
//! Image path: `g(x) = normalize(image_proj · x)`. Logits are
//! `cos(f_j, g) / τ` and the loss is softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorization::FactoredPrompt;
use crate::numeric::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Prompt length `b`.
    pub prompt_len: usize,
    /// Token / feature dimension `d`.
    pub token_dim: usize,
    /// Raw class-token dimension `e`.
    pub class_token_dim: usize,
    /// Raw image dimension `m`.
    pub image_dim: usize,
    pub num_classes: usize,
}

/// Frozen backbone shared by every client. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenEncoders {
    dims: EncoderDims,
    temperature: f64,
    class_tokens: Matrix,
    token_embed: Matrix,
    gates: Vec<Matrix>,
    text_proj: Matrix,
    image_proj: Matrix,
    /// `class_tokens · token_embed`, cached.
    lifted_tokens: Matrix,
}

impl FrozenEncoders {
    /// Draws all frozen weights from `rng`.
    pub fn random(dims: EncoderDims, temperature: f64, rng: &mut RngStream) -> Result<Self> {
        let EncoderDims {
            prompt_len: b,
            token_dim: d,
            class_token_dim: e,
            image_dim: m,
            num_classes: c,
        } = dims;
        if b == 0 || d == 0 || e == 0 || m == 0 || c < 2 {
            return Err(Error::InvalidArgument(format!("degenerate encoder dims {dims:?}")));
        }
        let mut normal = |rows, cols, std: f64, mean: f64| {
            Matrix::from_fn(rows, cols, |_, _| mean + std * rng.standard_normal())
        };
        let class_tokens = normal(c, e, 1.0, 0.0);
        let token_embed = normal(e, d, 1.0 / (e as f64).sqrt(), 0.0);
        let gates = (0..c).map(|_| normal(b, d, 1.0, 1.0)).collect();
        let text_proj = normal(d, d, 1.0 / (d as f64).sqrt(), 0.0);
        let image_proj = normal(d, m, 1.0 / (m as f64).sqrt(), 0.0);
        Self::from_parts(dims, temperature, class_tokens, token_embed, gates, text_proj, image_proj)
    }

    pub fn from_parts(
        dims: EncoderDims,
        temperature: f64,
        class_tokens: Matrix,
        token_embed: Matrix,
        gates: Vec<Matrix>,
        text_proj: Matrix,
        image_proj: Matrix,
    ) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        let (b, d, e, m, c) = (
            dims.prompt_len,
            dims.token_dim,
            dims.class_token_dim,
            dims.image_dim,
            dims.num_classes,
        );
        let check = |name: &'static str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(Error::shape(name, got, want))
            }
        };
        check("class_tokens", class_tokens.shape(), (c, e))?;
        check("token_embed", token_embed.shape(), (e, d))?;
        check("text_proj", text_proj.shape(), (d, d))?;
        check("image_proj", image_proj.shape(), (d, m))?;
        if gates.len() != c {
            return Err(Error::InvalidArgument(format!("{} gate matrices for {c} classes", gates.len())));
        }
        for g in &gates {
            check("gate", g.shape(), (b, d))?;
        }
        let lifted_tokens = class_tokens.matmul(&token_embed)?;
        Ok(FrozenEncoders {
            dims,
            temperature,
            class_tokens,
            token_embed,
            gates,
            text_proj,
            image_proj,
            lifted_tokens,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.dims.num_classes
    }

    /// Copy with a different temperature; weights unchanged.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::from_parts(
            self.dims,
            temperature,
            self.class_tokens.clone(),
            self.token_embed.clone(),
            self.gates.clone(),
            self.text_proj.clone(),
            self.image_proj.clone(),
        )
    }

    fn check_prompt(&self, prompt: &Matrix) -> Result<()> {
        let want = (self.dims.prompt_len, self.dims.token_dim);
        if prompt.shape() != want {
            return Err(Error::shape("prompt", prompt.shape(), want));
        }
        Ok(())
    }

    fn pooled_token(&self, prompt: &Matrix, class_id: usize) -> Vec<f64> {
        let b = self.dims.prompt_len;
        let gate = &self.gates[class_id];
        let mut q = self.lifted_tokens.row(class_id).to_vec();
        for i in 0..b {
            for ((qk, &gk), &pk) in q.iter_mut().zip(gate.row(i)).zip(prompt.row(i)) {
                *qk += gk * pk;
            }
        }
        let inv = 1.0 / (b + 1) as f64;
        q.iter_mut().for_each(|v| *v *= inv);
        q
    }

    /// Unit-norm text feature of `class_id` under `prompt`.
    pub fn text_feature(&self, prompt: &Matrix, class_id: usize) -> Result<Vec<f64>> {
        self.check_prompt(prompt)?;
        if class_id >= self.dims.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {class_id} out of range for {} classes",
                self.dims.num_classes
            )));
        }
        let z = self.text_proj.matvec(&self.pooled_token(prompt, class_id))?;
        Ok(normalize(z).0)
    }

    /// Unit-norm image feature of a raw sample.
    pub fn image_feature(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dims.image_dim {
            return Err(Error::shape("image", (x.len(), 1), (self.dims.image_dim, 1)));
        }
        Ok(normalize(self.image_proj.matvec(x)?).0)
    }

    /// All class features for one prompt, plus what backprop needs.
    pub fn text_features(&self, prompt: &Matrix) -> Result<TextFeatures> {
        self.check_prompt(prompt)?;
        let c = self.dims.num_classes;
        let mut features = Vec::with_capacity(c);
        let mut norms = Vec::with_capacity(c);
        let mut proj_t_features = Vec::with_capacity(c);
        for j in 0..c {
            let (f, n) = normalize(self.text_proj.matvec(&self.pooled_token(prompt, j))?);
            proj_t_features.push(self.text_proj.t_matvec(&f)?);
            features.push(f);
            norms.push(n);
        }
        Ok(TextFeatures {
            features,
            norms,
            proj_t_features,
        })
    }

    /// Cosine logits `cos(f_j, g)/τ` for a unit image feature.
    pub fn logits(&self, text: &TextFeatures, image_feat: &[f64]) -> Vec<f64> {
        text.features
            .iter()
            .map(|f| dot(f, image_feat) / self.temperature)
            .collect()
    }

    /// Softmax class probabilities for a unit image feature.
    pub fn probabilities(&self, text: &TextFeatures, image_feat: &[f64]) -> Vec<f64> {
        softmax(&self.logits(text, image_feat))
    }

    /// Per-example loss and gradient with respect to the full prompt `p`.
    pub fn prompt_gradients(&self, prompt: &Matrix, batch: &[Example]) -> Result<Vec<(f64, Matrix)>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let text = self.text_features(prompt)?;
        let (b, d) = (self.dims.prompt_len, self.dims.token_dim);
        let c = self.dims.num_classes;
        let pool = 1.0 / (b + 1) as f64;
        let mut out = Vec::with_capacity(batch.len());
        for ex in batch {
            if ex.label >= c {
                return Err(Error::InvalidArgument(format!("label {} out of range", ex.label)));
            }
            let g = &ex.feature;
            let cosines: Vec<f64> = text.features.iter().map(|f| dot(f, g)).collect();
            let logits: Vec<f64> = cosines.iter().map(|v| v / self.temperature).collect();
            let probs = softmax(&logits);
            let loss = log_sum_exp(&logits) - logits[ex.label];
            let proj_t_g = self.text_proj.t_matvec(g)?;

            let mut grad = Matrix::zeros(b, d);
            let mut dq = vec![0.0; d];
            for j in 0..c {
                let delta = probs[j] - if j == ex.label { 1.0 } else { 0.0 };
                if delta == 0.0 {
                    continue;
                }
                // dL/dq_j = δ_j/(τ‖z_j‖) · textᵀ(g − cos_j f_j), then the pool factor.
                let coef = delta / (self.temperature * text.norms[j]) * pool;
                for ((o, &a), &bf) in dq.iter_mut().zip(&proj_t_g).zip(&text.proj_t_features[j]) {
                    *o = coef * (a - cosines[j] * bf);
                }
                let gate = &self.gates[j];
                for i in 0..b {
                    for ((gr, &gt), &dqk) in grad.row_mut(i).iter_mut().zip(gate.row(i)).zip(&dq) {
                        *gr += gt * dqk;
                    }
                }
            }
            out.push((loss, grad));
        }
        Ok(out)
    }
}

/// Class text features for a fixed prompt.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    pub features: Vec<Vec<f64>>,
    /// Pre-normalization norms `‖z_j‖`.
    pub norms: Vec<f64>,
    /// `text_projᵀ · f_j`, reused by backprop.
    proj_t_features: Vec<Vec<f64>>,
}

impl TextFeatures {
    pub fn predict(&self, image_feat: &[f64]) -> usize {
        self.predict_among(image_feat, 0..self.features.len())
    }

    /// Arg-max over a restricted label space; ties go to the first candidate.
    pub fn predict_among(&self, image_feat: &[f64], candidates: impl IntoIterator<Item = usize>) -> usize {
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for j in candidates {
            let v = dot(&self.features[j], image_feat);
            if best == usize::MAX || v > best_v {
                best_v = v;
                best = j;
            }
        }
        best
    }
}

/// A unit image feature with its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub feature: Vec<f64>,
    pub label: usize,
}

/// Global prompt and (reconstructed) local prompt; the classifier sees their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub p_global: Matrix,
    pub p_local: Matrix,
}

impl PromptState {
    pub fn new(p_global: Matrix, p_local: Matrix) -> Result<Self> {
        if p_global.shape() != p_local.shape() {
            return Err(Error::shape("PromptState", p_global.shape(), p_local.shape()));
        }
        Ok(PromptState { p_global, p_local })
    }

    pub fn combined(&self) -> Matrix {
        self.p_global.add(&self.p_local).expect("shapes checked at construction")
    }
}

/// Class probabilities for one image under `p_global + p_local`.
pub fn predict_proba(prompts: &PromptState, encoders: &FrozenEncoders, image_feat: &[f64]) -> Result<Vec<f64>> {
    let text = encoders.text_features(&prompts.combined())?;
    if image_feat.len() != encoders.dims.token_dim {
        return Err(Error::shape("image_feat", (image_feat.len(), 1), (encoders.dims.token_dim, 1)));
    }
    Ok(encoders.probabilities(&text, image_feat))
}

/// Gradients of one example's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGrads {
    pub loss: f64,
    pub grad_global: Matrix,
    pub grad_u: Matrix,
    pub grad_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrads {
    /// Batch-mean cross-entropy.
    pub loss: f64,
    pub per_example: Vec<ExampleGrads>,
}

/// Forward pass on `p_global + u·v + r`, backprop to `p_global`, `u` and `v`.
///
/// `r` is treated as a constant, so `∇u = ∇p·vᵀ` and `∇v = uᵀ·∇p`.
pub fn loss_and_grads(
    p_global: &Matrix,
    factored: &FactoredPrompt,
    encoders: &FrozenEncoders,
    batch: &[Example],
) -> Result<LossAndGrads> {
    let prompt = p_global.add(&factored.reconstruct())?;
    let per = encoders.prompt_gradients(&prompt, batch)?;
    let mut total = 0.0;
    let per_example = per
        .into_iter()
        .map(|(loss, gp)| {
            total += loss;
            Ok(ExampleGrads {
                loss,
                grad_u: gp.matmul_t(&factored.v)?,
                grad_v: factored.u.t_matmul(&gp)?,
                grad_global: gp,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossAndGrads {
        loss: total / batch.len() as f64,
        per_example,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(mut v: Vec<f64>) -> (Vec<f64>, f64) {
    let n = dot(&v, &v).sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= n);
    (v, n)
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factorization::factorize;
    use crate::numeric::gaussian_matrix;

    fn small_dims() -> EncoderDims {
        EncoderDims {
            prompt_len: 2,
            token_dim: 4,
            class_token_dim: 3,
            image_dim: 5,
            num_classes: 3,
        }
    }

    fn setup(seed: u64, temperature: f64) -> (FrozenEncoders, RngStream) {
        let mut rng = RngStream::new(seed, 0);
        let enc = FrozenEncoders::random(small_dims(), temperature, &mut rng).unwrap();
        (enc, rng)
    }

    fn example(enc: &FrozenEncoders, rng: &mut RngStream, label: usize) -> Example {
        let x: Vec<f64> = (0..enc.dims().image_dim).map(|_| rng.standard_normal()).collect();
        Example {
            feature: enc.image_feature(&x).unwrap(),
            label,
        }
    }

    /// Step-by-step recomputation of the classifier without any shared helpers.
    fn straight_line_proba(enc: &FrozenEncoders, prompt: &Matrix, g: &[f64]) -> Vec<f64> {
        let b = enc.dims.prompt_len;
        let mut logits = Vec::new();
        for j in 0..enc.dims.num_classes {
            let mut tokens = vec![enc.class_tokens.matmul(&enc.token_embed).unwrap().row(j).to_vec()];
            for i in 0..b {
                tokens.push(
                    prompt
                        .row(i)
                        .iter()
                        .zip(enc.gates[j].row(i))
                        .map(|(p, g)| p * g)
                        .collect(),
                );
            }
            let pooled: Vec<f64> = (0..enc.dims.token_dim)
                .map(|k| tokens.iter().map(|t| t[k]).sum::<f64>() / tokens.len() as f64)
                .collect();
            let z = enc.text_proj.matvec(&pooled).unwrap();
            let cos = z.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
                / (z.iter().map(|a| a * a).sum::<f64>().sqrt() * g.iter().map(|a| a * a).sum::<f64>().sqrt());
            logits.push(cos / enc.temperature);
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        logits.iter().map(|l| l.exp() / z).collect()
    }

    #[test]
    fn text_feature_is_unit_norm() {
        let (enc, mut rng) = setup(1, 0.5);
        let p = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        for j in 0..3 {
            let f = enc.text_feature(&p, j).unwrap();
            assert!((dot(&f, &f).sqrt() - 1.0).abs() <= 1e-12);
        }
        assert!(enc.text_feature(&p, 3).is_err());
    }

    #[test]
    fn classes_get_different_features() {
        let (enc, mut rng) = setup(2, 0.5);
        let p = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let f0 = enc.text_feature(&p, 0).unwrap();
        let f1 = enc.text_feature(&p, 1).unwrap();
        assert!(dot(&f0, &f1) < 1.0 - 1e-6);
    }

    #[test]
    fn zero_prompt_reduces_to_class_token() {
        let (enc, _) = setup(3, 0.5);
        let f = enc.text_feature(&Matrix::zeros(2, 4), 0).unwrap();
        let t = enc.lifted_tokens.row(0).to_vec();
        let (want, _) = normalize(enc.text_proj.matvec(&t).unwrap());
        for (a, b) in f.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn symmetric_logits_give_uniform() {
        let (enc, mut rng) = setup(4, 0.5);
        let p = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let text = enc.text_features(&p).unwrap();
        // A feature orthogonal to every class feature makes all logits zero.
        let mut g = vec![0.0; 4];
        // null space of the 3x4 feature matrix via a Gram-Schmidt step on e_k
        for k in 0..4 {
            let mut cand = vec![0.0; 4];
            cand[k] = 1.0;
            let basis = crate::numeric::qr_orthonormalize(
                &Matrix::from_fn(4, 3, |i, j| text.features[j][i]),
            )
            .unwrap()
            .q;
            for j in 0..3 {
                let c = dot(&basis.col(j), &cand);
                for i in 0..4 {
                    cand[i] -= c * basis.get(i, j);
                }
            }
            if dot(&cand, &cand) > 1e-6 {
                g = normalize(cand).0;
                break;
            }
        }
        let probs = enc.probabilities(&text, &g);
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn large_temperature_is_nearly_uniform() {
        let (enc, mut rng) = setup(5, 1e6);
        let p = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let ex = example(&enc, &mut rng, 0);
        let state = PromptState::new(p, Matrix::zeros(2, 4)).unwrap();
        for v in predict_proba(&state, &enc, &ex.feature).unwrap() {
            assert!((v - 1.0 / 3.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn proba_matches_straight_line_oracle() {
        let (enc, mut rng) = setup(6, 0.07);
        let pg = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let pl = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let ex = example(&enc, &mut rng, 1);
        let state = PromptState::new(pg, pl).unwrap();
        let got = predict_proba(&state, &enc, &ex.feature).unwrap();
        let want = straight_line_proba(&enc, &state.combined(), &ex.feature);
        assert!((got.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_prediction_loss_is_ln_c() {
        let (enc, _) = setup(7, 1e9);
        let ex = Example {
            feature: normalize(vec![1.0, 2.0, 3.0, 4.0]).0,
            label: 2,
        };
        let out = enc.prompt_gradients(&Matrix::zeros(2, 4), &[ex]).unwrap();
        assert!((out[0].0 - 3f64.ln()).abs() <= 1e-8);
    }

    #[test]
    fn confident_correct_prediction_has_vanishing_loss() {
        let (enc, _) = setup(8, 1e-4);
        let text = enc.text_features(&Matrix::zeros(2, 4)).unwrap();
        let ex = Example {
            feature: text.features[1].clone(),
            label: 1,
        };
        let (loss, grad) = enc.prompt_gradients(&Matrix::zeros(2, 4), &[ex]).unwrap().remove(0);
        assert!(loss < 1e-12, "{loss}");
        assert!(grad.frobenius_norm() < 1e-9);
    }

    #[test]
    fn empty_batch_rejected() {
        let (enc, _) = setup(9, 1.0);
        assert!(enc.prompt_gradients(&Matrix::zeros(2, 4), &[]).is_err());
    }

    #[test]
    fn image_scale_invariance() {
        let (enc, mut rng) = setup(10, 0.1);
        let x: Vec<f64> = (0..5).map(|_| rng.standard_normal()).collect();
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let a = enc.image_feature(&x).unwrap();
        let b = enc.image_feature(&x3).unwrap();
        let p = gaussian_matrix(2, 4, 1.0, &mut rng).unwrap();
        let la = enc.prompt_gradients(&p, &[Example { feature: a, label: 0 }]).unwrap()[0].0;
        let lb = enc.prompt_gradients(&p, &[Example { feature: b, label: 0 }]).unwrap()[0].0;
        assert!((la - lb).abs() <= 1e-12);
    }

    #[test]
    fn factor_gradients_follow_chain_rule() {
        let (enc, mut rng) = setup(11, 0.2);
        let pg = gaussian_matrix(2, 4, 0.5, &mut rng).unwrap();
        let pl = gaussian_matrix(2, 4, 0.5, &mut rng).unwrap();
        let f = factorize(&pl, 1, &mut rng).unwrap();
        let batch = vec![example(&enc, &mut rng, 2)];
        let lg = loss_and_grads(&pg, &f, &enc, &batch).unwrap();
        let direct = enc.prompt_gradients(&pg.add(&pl).unwrap(), &batch).unwrap();
        let gp = &direct[0].1;
        let e = &lg.per_example[0];
        assert!(e.grad_global.max_abs_diff(gp).unwrap() <= 1e-10);
        assert!(e.grad_u.max_abs_diff(&gp.matmul_t(&f.v).unwrap()).unwrap() <= 1e-10);
        assert!(e.grad_v.max_abs_diff(&f.u.t_matmul(gp).unwrap()).unwrap() <= 1e-10);
    }
}
