//! Forward computation, loss and analytic gradients of the two-level model.
//!
//! Shapes used throughout (N examples, P patches, K embedding dim, H high
//! concepts, L = L_all low attributes, C classes):
//!
//! | tensor              | shape      |
//! |---------------------|------------|
//! | image embeddings    | N×K        |
//! | patch embeddings    | (N·P)×K    |
//! | `s_h`, `q_h`, `z_h` | N×H        |
//! | `s_l`, `q_l`, `z_l` | (N·P)×L    |
//! | `w_hc`              | H×C        |
//! | `w_lc`              | L×C        |
//! | `w_hs`              | K×H        |
//! | `w_ls`              | K×L        |
//!
//! Patch tensors are flattened so that row `n·P + p` holds patch `p` of
//! example `n`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::discovery::{
    kl_entry_grad, kl_to_prior, logit_in_range, relaxed_scalar, threshold_mean, BernoulliPosterior,
};
use crate::error::{CfcbmError, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::noise::{open_unit, stream, StreamKey};
use crate::numerics::{matmul, softmax_cross_entropy, Matrix};
use crate::store::{similarity_high, similarity_low, EmbeddingDataset};

/// Which heads and discovery blocks are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Both levels with discovery, linked through the hierarchy.
    #[default]
    Joint,
    /// High level only.
    HighOnly,
    /// Patch level only, no linkage.
    LowOnly,
    /// Both heads with every indicator fixed to 1.
    NoDiscovery,
}

impl Mode {
    pub fn high_head(self) -> bool {
        self != Mode::LowOnly
    }

    pub fn low_head(self) -> bool {
        self != Mode::HighOnly
    }

    pub fn high_discovery(self) -> bool {
        matches!(self, Mode::Joint | Mode::HighOnly)
    }

    pub fn low_discovery(self) -> bool {
        matches!(self, Mode::Joint | Mode::LowOnly)
    }

    pub fn linked(self) -> bool {
        self == Mode::Joint
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::HighOnly => "high-only",
            Mode::LowOnly => "low-only",
            Mode::NoDiscovery => "no-discovery",
        })
    }
}

impl FromStr for Mode {
    type Err = CfcbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "high-only" => Ok(Mode::HighOnly),
            "low-only" => Ok(Mode::LowOnly),
            "no-discovery" => Ok(Mode::NoDiscovery),
            other => Err(CfcbmError::Parameter(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub w_hc: Matrix,
    pub w_lc: Matrix,
    pub w_hs: Matrix,
    pub w_ls: Matrix,
}

impl ModelParams {
    /// Classification matrices uniform in ±1/√fan_in, amortization matrices
    /// zero so every posterior starts at exactly 0.5.
    pub fn init(
        embed_dim: usize,
        n_high: usize,
        n_low: usize,
        n_classes: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream(seed, StreamKey::Init);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows.max(1) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| bound * (2.0 * open_unit(&mut rng) - 1.0))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("length matches by construction")
        };
        let w_hc = uniform(n_high, n_classes);
        let w_lc = uniform(n_low, n_classes);
        ModelParams {
            w_hc,
            w_lc,
            w_hs: Matrix::zeros(embed_dim, n_high),
            w_ls: Matrix::zeros(embed_dim, n_low),
        }
    }

    pub fn check_shapes(
        &self,
        embed_dim: usize,
        n_high: usize,
        n_low: usize,
        n_classes: usize,
    ) -> Result<()> {
        let expected = [
            ("w_hc", &self.w_hc, (n_high, n_classes)),
            ("w_lc", &self.w_lc, (n_low, n_classes)),
            ("w_hs", &self.w_hs, (embed_dim, n_high)),
            ("w_ls", &self.w_ls, (embed_dim, n_low)),
        ];
        for (name, m, shape) in expected {
            if m.shape() != shape {
                return Err(CfcbmError::dims(name, m.shape(), shape));
            }
        }
        Ok(())
    }

    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_hc, &self.w_lc, &self.w_hs, &self.w_ls]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.w_hc,
            &mut self.w_lc,
            &mut self.w_hs,
            &mut self.w_ls,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }
}

/// Gradients, one per parameter matrix.
pub type Gradients = ModelParams;

/// Everything the forward pass needs about a batch of examples.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs {
    pub image: Matrix,
    pub patches: Matrix,
    pub s_h: Matrix,
    pub s_l: Matrix,
    pub labels: Vec<usize>,
    pub n_patches: usize,
}

impl BatchInputs {
    pub fn from_dataset(ds: &EmbeddingDataset) -> Result<Self> {
        Ok(BatchInputs {
            image: ds.image_embeddings.clone(),
            patches: ds.patch_embeddings.clone(),
            s_h: similarity_high(ds, &ds.concepts)?,
            s_l: similarity_low(ds, &ds.concepts)?,
            labels: ds.labels.clone(),
            n_patches: ds.n_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> BatchInputs {
        let p = self.n_patches;
        let patch_rows: Vec<usize> = indices.iter().flat_map(|&i| i * p..i * p + p).collect();
        BatchInputs {
            image: self.image.select_rows(indices),
            patches: self.patches.select_rows(&patch_rows),
            s_h: self.s_h.select_rows(indices),
            s_l: self.s_l.select_rows(&patch_rows),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_patches: p,
        }
    }

    pub fn range(&self, start: usize, end: usize) -> BatchInputs {
        let p = self.n_patches;
        BatchInputs {
            image: self.image.slice_rows(start, end),
            patches: self.patches.slice_rows(start * p, end * p),
            s_h: self.s_h.slice_rows(start, end),
            s_l: self.s_l.slice_rows(start * p, end * p),
            labels: self.labels[start..end].to_vec(),
            n_patches: p,
        }
    }
}

/// How indicators are produced in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum Indicators {
    /// One Binary-Concrete sample per latent from the given uniforms
    /// (N×H and (N·P)×L).
    Relaxed {
        temperature: f64,
        uniforms_high: Matrix,
        uniforms_low: Matrix,
    },
    /// Posterior mean thresholded at `tau`.
    Threshold { tau: f64 },
    /// Caller-supplied indicator values.
    Fixed { z_h: Matrix, z_l: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub n_patches: usize,
    pub s_h: Matrix,
    pub s_l: Matrix,
    /// Amortization logits before the sigmoid; present when the level runs discovery.
    pub pre_h: Option<Matrix>,
    pub pre_l: Option<Matrix>,
    pub q_h: Option<BernoulliPosterior>,
    pub q_l: Option<BernoulliPosterior>,
    /// Set when the indicators are relaxed samples.
    pub temperature: Option<f64>,
    pub z_h: Matrix,
    pub z_l: Matrix,
    /// Unclamped gate Σ_h z_h\[n,h\]·B\[l,h\], N×L; present when linked.
    pub gate_raw: Option<Matrix>,
    pub z_combined: Matrix,
    pub logits_high: Matrix,
    pub logits_low: Matrix,
    /// Winning patch per (example, class), row-major N×C.
    pub argmax_patch: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_high: f64,
    pub ce_low: f64,
    pub kl_high: f64,
    pub kl_low: f64,
    pub total: f64,
}

/// Prior and KL weight of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub alpha_h: f64,
    pub alpha_l: f64,
    pub beta: f64,
}

/// `(z_h ⊙ s_h) · w_hc`.
pub fn forward_high(s_h: &Matrix, z_h: &Matrix, w_hc: &Matrix) -> Result<Matrix> {
    matmul(&z_h.hadamard(s_h)?, w_hc)
}

fn gate_raw(z_h: &Matrix, hierarchy: &ConceptHierarchy) -> Result<Matrix> {
    if z_h.cols() != hierarchy.n_high() {
        return Err(CfcbmError::dims(
            "high-level indicators vs hierarchy",
            z_h.shape(),
            (z_h.rows(), hierarchy.n_high()),
        ));
    }
    z_h.matmul_t(&hierarchy.membership)
}

fn apply_gate(gate_raw: &Matrix, z_l: &Matrix, n_patches: usize) -> Result<Matrix> {
    if z_l.shape() != (gate_raw.rows() * n_patches, gate_raw.cols()) {
        return Err(CfcbmError::dims(
            "low-level indicators",
            z_l.shape(),
            (gate_raw.rows() * n_patches, gate_raw.cols()),
        ));
    }
    let mut z = z_l.clone();
    for r in 0..z.rows() {
        let gate = gate_raw.row(r / n_patches);
        for (v, &g) in z.row_mut(r).iter_mut().zip(gate) {
            *v *= g.clamp(0.0, 1.0);
        }
    }
    Ok(z)
}

/// `z[n,p,l] = clamp₀¹(Σ_h z_h[n,h]·B[l,h]) · z_l[n,p,l]`.
pub fn link_indicators(
    z_h: &Matrix,
    z_l: &Matrix,
    hierarchy: &ConceptHierarchy,
    n_patches: usize,
) -> Result<Matrix> {
    apply_gate(&gate_raw(z_h, hierarchy)?, z_l, n_patches)
}

/// Per-patch logits `(z ⊙ s_l) · w_lc`, max-pooled over patches per class.
/// Returns the N×C logits and the winning patch for every (n, c), ties to
/// the first patch.
pub fn forward_low(
    s_l: &Matrix,
    z: &Matrix,
    w_lc: &Matrix,
    n_patches: usize,
) -> Result<(Matrix, Vec<usize>)> {
    if n_patches == 0 || !s_l.rows().is_multiple_of(n_patches) {
        return Err(CfcbmError::Dimension(format!(
            "{} patch rows do not split into groups of {n_patches}",
            s_l.rows()
        )));
    }
    let per_patch = matmul(&z.hadamard(s_l)?, w_lc)?;
    let n = s_l.rows() / n_patches;
    let c = w_lc.cols();
    let mut out = Matrix::zeros(n, c);
    let mut arg = vec![0usize; n * c];
    for i in 0..n {
        for k in 0..c {
            let mut best = 0;
            let mut best_val = per_patch[(i * n_patches, k)];
            for p in 1..n_patches {
                let v = per_patch[(i * n_patches + p, k)];
                if v > best_val {
                    best = p;
                    best_val = v;
                }
            }
            out[(i, k)] = best_val;
            arg[i * c + k] = best;
        }
    }
    Ok((out, arg))
}

fn indicators_for(
    level_discovers: bool,
    pre: Option<&Matrix>,
    q: Option<&BernoulliPosterior>,
    indicators: &Indicators,
    relaxed_uniforms: Option<&Matrix>,
    fixed: Option<&Matrix>,
    shape: (usize, usize),
) -> Result<Matrix> {
    if !level_discovers {
        return Ok(Matrix::filled(shape.0, shape.1, 1.0));
    }
    let q = q.expect("posterior present when the level discovers");
    let _ = pre;
    match indicators {
        Indicators::Relaxed { temperature, .. } => {
            let u = relaxed_uniforms.expect("uniforms present for relaxed sampling");
            if u.shape() != shape {
                return Err(CfcbmError::dims("sampler noise", u.shape(), shape));
            }
            if temperature.is_nan() || *temperature <= 0.0 {
                return Err(CfcbmError::Parameter(format!(
                    "temperature must be positive, got {temperature}"
                )));
            }
            let data = q
                .probs
                .data()
                .iter()
                .zip(u.data())
                .map(|(&qi, &ui)| relaxed_scalar(qi, ui, *temperature))
                .collect();
            Matrix::from_vec(shape.0, shape.1, data)
        }
        Indicators::Threshold { tau } => Ok(threshold_mean(q, *tau).values),
        Indicators::Fixed { .. } => {
            let z = fixed.expect("fixed indicators present");
            if z.shape() != shape {
                return Err(CfcbmError::dims("fixed indicators", z.shape(), shape));
            }
            Ok(z.clone())
        }
    }
}

/// Runs both levels on a batch.
pub fn forward(
    params: &ModelParams,
    inputs: &BatchInputs,
    hierarchy: &ConceptHierarchy,
    mode: Mode,
    indicators: &Indicators,
) -> Result<ForwardTrace> {
    let n = inputs.len();
    let p = inputs.n_patches;
    let (h, l) = (params.w_hc.rows(), params.w_lc.rows());
    if inputs.s_h.shape() != (n, h) {
        return Err(CfcbmError::dims(
            "high similarities",
            inputs.s_h.shape(),
            (n, h),
        ));
    }
    if inputs.s_l.shape() != (n * p, l) {
        return Err(CfcbmError::dims(
            "low similarities",
            inputs.s_l.shape(),
            (n * p, l),
        ));
    }

    let (pre_h, q_h) = if mode.high_discovery() {
        let pre = matmul(&inputs.image, &params.w_hs)?;
        let q = BernoulliPosterior::from_logits(&pre);
        (Some(pre), Some(q))
    } else {
        (None, None)
    };
    let (pre_l, q_l) = if mode.low_discovery() {
        let pre = matmul(&inputs.patches, &params.w_ls)?;
        let q = BernoulliPosterior::from_logits(&pre);
        (Some(pre), Some(q))
    } else {
        (None, None)
    };

    let (u_h, u_l, fixed_h, fixed_l, temperature) = match indicators {
        Indicators::Relaxed {
            temperature,
            uniforms_high,
            uniforms_low,
        } => (
            Some(uniforms_high),
            Some(uniforms_low),
            None,
            None,
            Some(*temperature),
        ),
        Indicators::Fixed { z_h, z_l } => (None, None, Some(z_h), Some(z_l), None),
        Indicators::Threshold { .. } => (None, None, None, None, None),
    };

    let z_h = indicators_for(
        mode.high_discovery(),
        pre_h.as_ref(),
        q_h.as_ref(),
        indicators,
        u_h,
        fixed_h,
        (n, h),
    )?;
    let z_l = indicators_for(
        mode.low_discovery(),
        pre_l.as_ref(),
        q_l.as_ref(),
        indicators,
        u_l,
        fixed_l,
        (n * p, l),
    )?;

    let (gate, z_combined) = if mode.linked() {
        let g = gate_raw(&z_h, hierarchy)?;
        let z = apply_gate(&g, &z_l, p)?;
        (Some(g), z)
    } else {
        (None, z_l.clone())
    };

    let logits_high = forward_high(&inputs.s_h, &z_h, &params.w_hc)?;
    let (logits_low, argmax_patch) = forward_low(&inputs.s_l, &z_combined, &params.w_lc, p)?;

    Ok(ForwardTrace {
        mode,
        n_patches: p,
        s_h: inputs.s_h.clone(),
        s_l: inputs.s_l.clone(),
        pre_h,
        pre_l,
        q_h,
        q_l,
        temperature: if matches!(indicators, Indicators::Relaxed { .. }) {
            temperature
        } else {
            None
        },
        z_h,
        z_l,
        gate_raw: gate,
        z_combined,
        logits_high,
        logits_low,
        argmax_patch,
    })
}

fn mean_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = labels.len();
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (loss, g) = softmax_cross_entropy(logits.row(i), y)?;
        total += loss;
        for (dst, gi) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = gi / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Batch-mean cross-entropy of each active head plus β-weighted KL terms,
/// with KL summed over concepts (and patches) per example and averaged over
/// the batch.
pub fn compute_loss(
    trace: &ForwardTrace,
    labels: &[usize],
    objective: Objective,
) -> Result<LossBreakdown> {
    let n = labels.len();
    if trace.logits_high.rows() != n {
        return Err(CfcbmError::Dimension(format!(
            "{} labels for a batch of {}",
            n,
            trace.logits_high.rows()
        )));
    }
    let mut out = LossBreakdown::default();
    if trace.mode.high_head() {
        out.ce_high = mean_ce(&trace.logits_high, labels)?.0;
    }
    if trace.mode.low_head() {
        out.ce_low = mean_ce(&trace.logits_low, labels)?.0;
    }
    if let Some(q) = &trace.q_h {
        out.kl_high = kl_to_prior(q, objective.alpha_h)?.iter().sum::<f64>() / n as f64;
    }
    if let Some(q) = &trace.q_l {
        out.kl_low = kl_to_prior(q, objective.alpha_l)?.iter().sum::<f64>() / n as f64;
    }
    out.total = out.ce_high + out.ce_low + objective.beta * (out.kl_high + out.kl_low);
    Ok(out)
}

/// Gradient of the amortization logits: the sampler path (when relaxed)
/// plus the KL term, both zero where the probability is clamped.
fn amortization_logit_grad(
    pre: &Matrix,
    q: &BernoulliPosterior,
    z: &Matrix,
    dz: Option<&Matrix>,
    temperature: Option<f64>,
    kl_scale: f64,
    alpha: f64,
) -> Matrix {
    let mut out = Matrix::zeros(pre.rows(), pre.cols());
    for i in 0..pre.data().len() {
        let a = pre.data()[i];
        if !logit_in_range(a) {
            continue;
        }
        let qi = q.probs.data()[i];
        let dq = qi * (1.0 - qi);
        let mut g = kl_scale * kl_entry_grad(qi, alpha) * dq;
        if let (Some(dz), Some(t)) = (dz, temperature) {
            let zi = z.data()[i];
            // dz/da = dz/dq · dq/da = z(1−z)/t
            g += dz.data()[i] * zi * (1.0 - zi) / t;
        }
        out.data_mut()[i] = g;
    }
    out
}

/// Exact gradients of [`compute_loss`] for the four parameter matrices,
/// routed through the relaxed samples, the linkage gate and the max over
/// patches (to the winning patch).
pub fn backward(
    trace: &ForwardTrace,
    inputs: &BatchInputs,
    params: &ModelParams,
    hierarchy: &ConceptHierarchy,
    objective: Objective,
) -> Result<Gradients> {
    let labels = &inputs.labels;
    let n = labels.len();
    let p = trace.n_patches;
    let c = params.w_hc.cols();
    let mode = trace.mode;
    let mut grads = ModelParams {
        w_hc: Matrix::zeros(params.w_hc.rows(), c),
        w_lc: Matrix::zeros(params.w_lc.rows(), c),
        w_hs: Matrix::zeros(params.w_hs.rows(), params.w_hs.cols()),
        w_ls: Matrix::zeros(params.w_ls.rows(), params.w_ls.cols()),
    };
    let relaxed = trace.temperature.is_some();
    let mut dz_h = Matrix::zeros(n, params.w_hc.rows());

    if mode.high_head() {
        let (_, g_h) = mean_ce(&trace.logits_high, labels)?;
        let masked = trace.z_h.hadamard(&trace.s_h)?;
        grads.w_hc = masked.t_matmul(&g_h)?;
        if relaxed {
            dz_h = g_h.matmul_t(&params.w_hc)?.hadamard(&trace.s_h)?;
        }
    }

    let mut dz_l = None;
    if mode.low_head() {
        let (_, g_l) = mean_ce(&trace.logits_low, labels)?;
        let mut d_patch = Matrix::zeros(n * p, c);
        for i in 0..n {
            for k in 0..c {
                let winner = trace.argmax_patch[i * c + k];
                d_patch[(i * p + winner, k)] += g_l[(i, k)];
            }
        }
        let masked = trace.z_combined.hadamard(&trace.s_l)?;
        grads.w_lc = masked.t_matmul(&d_patch)?;
        if relaxed {
            let dz = d_patch.matmul_t(&params.w_lc)?.hadamard(&trace.s_l)?;
            if let Some(raw) = &trace.gate_raw {
                let l = raw.cols();
                let mut d_zl = dz.clone();
                let mut d_gate = Matrix::zeros(n, l);
                for r in 0..n * p {
                    let i = r / p;
                    for j in 0..l {
                        let g = raw[(i, j)];
                        d_zl[(r, j)] = dz[(r, j)] * g.clamp(0.0, 1.0);
                        if g <= 1.0 {
                            d_gate[(i, j)] += dz[(r, j)] * trace.z_l[(r, j)];
                        }
                    }
                }
                // gate_raw = z_h · Bᵀ
                let back = matmul(&d_gate, &hierarchy.membership)?;
                for (dst, &v) in dz_h.data_mut().iter_mut().zip(back.data()) {
                    *dst += v;
                }
                dz_l = Some(d_zl);
            } else {
                dz_l = Some(dz);
            }
        }
    }

    let kl_scale = objective.beta / n as f64;
    if let (Some(pre), Some(q)) = (&trace.pre_h, &trace.q_h) {
        let da = amortization_logit_grad(
            pre,
            q,
            &trace.z_h,
            relaxed.then_some(&dz_h),
            trace.temperature,
            kl_scale,
            objective.alpha_h,
        );
        grads.w_hs = inputs.image.t_matmul(&da)?;
    }
    if let (Some(pre), Some(q)) = (&trace.pre_l, &trace.q_l) {
        let da = amortization_logit_grad(
            pre,
            q,
            &trace.z_l,
            dz_l.as_ref(),
            trace.temperature,
            kl_scale,
            objective.alpha_l,
        );
        grads.w_ls = inputs.patches.t_matmul(&da)?;
    }
    Ok(grads)
}
