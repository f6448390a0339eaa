//! Mini-batch training with Adam and keyed noise streams, plus checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::discovery::threshold_mean;
use crate::error::{CfcbmError, Result};
use crate::hierarchy::{ConceptHierarchy, Manifest};
use crate::model::{
    backward, compute_loss, forward, link_indicators, BatchInputs, ForwardTrace, Indicators,
    LossBreakdown, Mode, ModelParams, Objective,
};
use crate::noise::{permutation, stream, uniform_matrix, StreamKey, Tensor};
use crate::numerics::{adam_step, argmax, AdamConfig, AdamState, Matrix};
use crate::store::{is_perfect_square, EmbeddingDataset};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha_h: f64,
    pub alpha_l: f64,
    pub beta: f64,
    pub gumbel_temperature: f64,
    pub lr: f64,
    pub amortization_lr_multiplier: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub infer_tau: f64,
    /// Expected patch count; checked against the dataset when set.
    pub patches: Option<usize>,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_h: 1e-4,
            alpha_l: 1e-4,
            beta: 1e-4,
            gumbel_temperature: 0.1,
            lr: 1e-3,
            amortization_lr_multiplier: 10.0,
            epochs: 1000,
            batch_size: 256,
            seed: 0,
            infer_tau: 0.05,
            patches: None,
            mode: Mode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(CfcbmError::Parameter(format!(
                    "{name} must lie in (0, 1), got {v}"
                )))
            }
        };
        unit("alpha_h", self.alpha_h)?;
        unit("alpha_l", self.alpha_l)?;
        unit("gumbel_temperature", self.gumbel_temperature)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CfcbmError::Parameter(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.amortization_lr_multiplier.is_nan() || self.amortization_lr_multiplier <= 0.0 {
            return Err(CfcbmError::Parameter(format!(
                "amortization_lr_multiplier must be positive, got {}",
                self.amortization_lr_multiplier
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(CfcbmError::Parameter(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(CfcbmError::Parameter(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.infer_tau) {
            return Err(CfcbmError::Parameter(format!(
                "infer_tau must lie in [0, 1], got {}",
                self.infer_tau
            )));
        }
        if let Some(p) = self.patches {
            if !is_perfect_square(p) {
                return Err(CfcbmError::Parameter(format!(
                    "patch count {p} is not a perfect square"
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            alpha_h: self.alpha_h,
            alpha_l: self.alpha_l,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub loss: LossBreakdown,
    pub train_accuracy_high: f64,
    pub train_accuracy_low: f64,
    /// Mean % of active high-level concepts per example.
    pub sparsity_high: f64,
    /// Mean % of active (linked) attributes per patch.
    pub sparsity_low: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Everything needed to continue training: parameters, optimizer moments
/// and the number of finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// One per parameter matrix, in [`ModelParams::matrices`] order.
    pub optimizers: [AdamState; 4],
    pub epochs_done: u64,
}

impl TrainState {
    pub fn new(ds: &EmbeddingDataset, config: &TrainConfig) -> Self {
        let params = ModelParams::init(
            ds.embed_dim(),
            ds.n_high(),
            ds.n_low(),
            ds.n_classes,
            config.seed,
        );
        let amort_lr = config.lr * config.amortization_lr_multiplier;
        let lrs = [config.lr, config.lr, amort_lr, amort_lr];
        let optimizers = std::array::from_fn(|i| {
            let (r, c) = params.matrices()[i].shape();
            AdamState::new(r, c, AdamConfig::with_lr(lrs[i]))
        });
        TrainState {
            config: config.clone(),
            params,
            optimizers,
            epochs_done: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.optimizers[0].step_count
    }

    /// Trains `epochs` more epochs, continuing the epoch counter.
    pub fn run(
        &mut self,
        ds: &EmbeddingDataset,
        hierarchy: &ConceptHierarchy,
        epochs: u64,
    ) -> Result<TrainHistory> {
        check_inputs(ds, hierarchy, &self.config)?;
        self.params
            .check_shapes(ds.embed_dim(), ds.n_high(), ds.n_low(), ds.n_classes)?;
        let inputs = BatchInputs::from_dataset(ds)?;
        let mut history = TrainHistory::default();
        for _ in 0..epochs {
            let record = self.run_epoch(&inputs, hierarchy)?;
            history.epochs.push(record);
        }
        Ok(history)
    }

    fn run_epoch(
        &mut self,
        inputs: &BatchInputs,
        hierarchy: &ConceptHierarchy,
    ) -> Result<EpochRecord> {
        let cfg = &self.config;
        let epoch = self.epochs_done;
        let n = inputs.len();
        let order = permutation(&mut stream(cfg.seed, StreamKey::Shuffle { epoch }), n);
        let (h, l) = (hierarchy.n_high(), hierarchy.n_low());
        let p = inputs.n_patches;
        let objective = cfg.objective();

        let mut totals = LossBreakdown::default();
        let (mut correct_h, mut correct_l) = (0usize, 0usize);
        let (mut active_h, mut active_l) = (0.0, 0.0);

        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch_inputs = inputs.select(idx);
            let m = idx.len();
            let key = |tensor| StreamKey::Noise {
                epoch,
                batch: batch as u64,
                tensor,
            };
            let indicators = Indicators::Relaxed {
                temperature: cfg.gumbel_temperature,
                uniforms_high: uniform_matrix(
                    &mut stream(cfg.seed, key(Tensor::HighIndicators)),
                    m,
                    h,
                ),
                uniforms_low: uniform_matrix(
                    &mut stream(cfg.seed, key(Tensor::LowIndicators)),
                    m * p,
                    l,
                ),
            };
            let trace = forward(
                &self.params,
                &batch_inputs,
                hierarchy,
                cfg.mode,
                &indicators,
            )?;
            let loss = compute_loss(&trace, &batch_inputs.labels, objective)?;
            let step = self.step_count() + 1;
            if !loss.total.is_finite() {
                return Err(CfcbmError::Divergence {
                    step,
                    detail: format!("loss is {} in epoch {epoch}, batch {batch}", loss.total),
                });
            }
            let grads = backward(&trace, &batch_inputs, &self.params, hierarchy, objective)?;
            for ((param, grad), state) in self
                .params
                .matrices_mut()
                .into_iter()
                .zip(grads.matrices())
                .zip(self.optimizers.iter_mut())
            {
                adam_step(param, grad, state)?;
            }
            if !self.params.is_finite() {
                return Err(CfcbmError::Divergence {
                    step,
                    detail: format!("non-finite parameters after epoch {epoch}, batch {batch}"),
                });
            }

            let w = m as f64;
            totals.ce_high += w * loss.ce_high;
            totals.ce_low += w * loss.ce_low;
            totals.kl_high += w * loss.kl_high;
            totals.kl_low += w * loss.kl_low;
            totals.total += w * loss.total;
            for (i, &y) in batch_inputs.labels.iter().enumerate() {
                correct_h += usize::from(argmax(trace.logits_high.row(i)) == y);
                correct_l += usize::from(argmax(trace.logits_low.row(i)) == y);
            }
            let (sh, sl) = batch_sparsity(&trace, hierarchy, cfg.infer_tau)?;
            active_h += w * sh;
            active_l += w * sl;
        }

        self.epochs_done += 1;
        let nf = n.max(1) as f64;
        Ok(EpochRecord {
            epoch,
            loss: LossBreakdown {
                ce_high: totals.ce_high / nf,
                ce_low: totals.ce_low / nf,
                kl_high: totals.kl_high / nf,
                kl_low: totals.kl_low / nf,
                total: totals.total / nf,
            },
            train_accuracy_high: correct_h as f64 / nf,
            train_accuracy_low: correct_l as f64 / nf,
            sparsity_high: active_h / nf,
            sparsity_low: active_l / nf,
        })
    }
}

/// Percent of active concepts under mean thresholding, from a training trace.
fn batch_sparsity(
    trace: &ForwardTrace,
    hierarchy: &ConceptHierarchy,
    tau: f64,
) -> Result<(f64, f64)> {
    let p = trace.n_patches;
    let hard_h = match &trace.q_h {
        Some(q) => threshold_mean(q, tau).values,
        None => Matrix::filled(trace.z_h.rows(), trace.z_h.cols(), 1.0),
    };
    let hard_l = match &trace.q_l {
        Some(q) => threshold_mean(q, tau).values,
        None => Matrix::filled(trace.z_l.rows(), trace.z_l.cols(), 1.0),
    };
    let linked = if trace.mode.linked() {
        link_indicators(&hard_h, &hard_l, hierarchy, p)?
    } else {
        hard_l
    };
    let pct = |m: &Matrix| {
        if m.data().is_empty() {
            0.0
        } else {
            100.0 * m.mean()
        }
    };
    Ok((pct(&hard_h), pct(&linked)))
}

fn check_inputs(
    ds: &EmbeddingDataset,
    hierarchy: &ConceptHierarchy,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    ds.check_shapes()?;
    hierarchy.validate(&ds.concepts)?;
    if let Some(p) = config.patches {
        if p != ds.n_patches {
            return Err(CfcbmError::Validation(format!(
                "config expects {p} patches but the dataset has {}",
                ds.n_patches
            )));
        }
    }
    Ok(())
}

/// Trains from a fresh initialization for `config.epochs` epochs.
pub fn train(
    ds: &EmbeddingDataset,
    hierarchy: &ConceptHierarchy,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let (state, history) = train_state(ds, hierarchy, config)?;
    Ok((state.params, history))
}

/// Like [`train`] but returns the full resumable state.
pub fn train_state(
    ds: &EmbeddingDataset,
    hierarchy: &ConceptHierarchy,
    config: &TrainConfig,
) -> Result<(TrainState, TrainHistory)> {
    check_inputs(ds, hierarchy, config)?;
    let mut state = TrainState::new(ds, config);
    let history = state.run(ds, hierarchy, config.epochs)?;
    Ok((state, history))
}

/// A checkpoint bundles the training state with the hierarchy it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub hierarchy: ConceptHierarchy,
}

fn write_blob<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(bytes.len() as u64)?;
    w.write_all(bytes)
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> std::io::Result<()> {
    for &x in m.data() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn write_checkpoint_to<W: Write>(
    w: &mut W,
    state: &TrainState,
    hierarchy: &ConceptHierarchy,
) -> Result<()> {
    let config = serde_json::to_vec(&state.config)?;
    let manifest = serde_json::to_vec(&hierarchy.to_manifest())?;
    let io = |e| CfcbmError::io("<checkpoint>", e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)
        .map_err(io)?;
    write_blob(w, &config).map_err(io)?;
    write_blob(w, &manifest).map_err(io)?;
    w.write_u64::<LittleEndian>(state.epochs_done).map_err(io)?;
    for (m, opt) in state.params.matrices().into_iter().zip(&state.optimizers) {
        w.write_u64::<LittleEndian>(m.rows() as u64).map_err(io)?;
        w.write_u64::<LittleEndian>(m.cols() as u64).map_err(io)?;
        write_matrix(w, m).map_err(io)?;
        w.write_f64::<LittleEndian>(opt.config.lr).map_err(io)?;
        w.write_u64::<LittleEndian>(opt.step_count).map_err(io)?;
        write_matrix(w, &opt.first_moment).map_err(io)?;
        write_matrix(w, &opt.second_moment).map_err(io)?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    state: &TrainState,
    hierarchy: &ConceptHierarchy,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CfcbmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint_to(&mut w, state, hierarchy)?;
    w.flush().map_err(|e| CfcbmError::io(path, e))
}

fn format_err(e: std::io::Error) -> CfcbmError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CfcbmError::Format("checkpoint is truncated".into())
    } else {
        CfcbmError::Format(e.to_string())
    }
}

const MAX_BLOB: u64 = 1 << 30;

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = r.read_u64::<LittleEndian>().map_err(format_err)?;
    if len > MAX_BLOB {
        return Err(CfcbmError::Format(format!(
            "implausible block length {len}"
        )));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(format_err)?;
    Ok(buf)
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = vec![0f64; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data)
        .map_err(format_err)?;
    Matrix::from_vec(rows, cols, data)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CfcbmError::Format(format!(
            "bad checkpoint magic {magic:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(format_err)?;
    if version != CHECKPOINT_VERSION {
        return Err(CfcbmError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config: TrainConfig = serde_json::from_slice(&read_blob(r)?)
        .map_err(|e| CfcbmError::Format(format!("checkpoint config: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&read_blob(r)?)
        .map_err(|e| CfcbmError::Format(format!("checkpoint manifest: {e}")))?;
    let hierarchy = ConceptHierarchy::from_manifest(&manifest)?;
    let epochs_done = r.read_u64::<LittleEndian>().map_err(format_err)?;

    let mut mats = Vec::with_capacity(4);
    let mut opts = Vec::with_capacity(4);
    for _ in 0..4 {
        let rows = r.read_u64::<LittleEndian>().map_err(format_err)? as usize;
        let cols = r.read_u64::<LittleEndian>().map_err(format_err)? as usize;
        if rows
            .checked_mul(cols)
            .is_none_or(|n| n > (MAX_BLOB as usize) / 8)
        {
            return Err(CfcbmError::Format(format!(
                "implausible matrix shape {rows}x{cols}"
            )));
        }
        mats.push(read_matrix(r, rows, cols)?);
        let lr = r.read_f64::<LittleEndian>().map_err(format_err)?;
        let step_count = r.read_u64::<LittleEndian>().map_err(format_err)?;
        let first_moment = read_matrix(r, rows, cols)?;
        let second_moment = read_matrix(r, rows, cols)?;
        opts.push(AdamState {
            first_moment,
            second_moment,
            step_count,
            config: AdamConfig::with_lr(lr),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(format_err)? != 0 {
        return Err(CfcbmError::Format("trailing bytes after checkpoint".into()));
    }
    let mut mats = mats.into_iter();
    let params = ModelParams {
        w_hc: mats.next().unwrap(),
        w_lc: mats.next().unwrap(),
        w_hs: mats.next().unwrap(),
        w_ls: mats.next().unwrap(),
    };
    let (h, c) = params.w_hc.shape();
    let (k, l) = params.w_ls.shape();
    params.check_shapes(k, h, l, c)?;
    if (h, l) != (hierarchy.n_high(), hierarchy.n_low()) {
        return Err(CfcbmError::Format(format!(
            "checkpoint parameters are sized for {h}/{l} concepts, manifest lists {}/{}",
            hierarchy.n_high(),
            hierarchy.n_low()
        )));
    }
    let optimizers: [AdamState; 4] = opts.try_into().expect("four optimizer states");
    Ok(Checkpoint {
        state: TrainState {
            config,
            params,
            optimizers,
            epochs_done,
        },
        hierarchy,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfcbmError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted, PlantedSpec};

    fn small() -> (EmbeddingDataset, ConceptHierarchy) {
        let spec = PlantedSpec {
            n_examples: 120,
            n_classes: 4,
            embed_dim: 16,
            attrs_per_class: 3,
            n_patches: 4,
            ..PlantedSpec::default()
        };
        planted(&spec, 3).unwrap()
    }

    fn config(epochs: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let (ds, hier) = small();
        let (params, history) = train(&ds, &hier, &config(0)).unwrap();
        assert_eq!(params, ModelParams::init(16, 4, 12, 4, 5));
        assert!(history.epochs.is_empty());
    }

    #[test]
    fn equal_seeds_give_identical_parameters() {
        let (ds, hier) = small();
        let a = train(&ds, &hier, &config(3)).unwrap();
        let b = train(&ds, &hier, &config(3)).unwrap();
        assert_eq!(a, b);
        let c = train(
            &ds,
            &hier,
            &TrainConfig {
                seed: 6,
                ..config(3)
            },
        )
        .unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
        let (ds, hier) = small();
        let (full, full_hist) = train_state(&ds, &hier, &config(6)).unwrap();

        let (first, first_hist) = train_state(&ds, &hier, &config(2)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint_to(&mut bytes, &first, &hier).unwrap();
        let mut loaded = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.state, first);
        assert_eq!(loaded.hierarchy, hier);
        let rest = loaded.state.run(&ds, &loaded.hierarchy, 4).unwrap();

        assert_eq!(loaded.state.params, full.params);
        assert_eq!(loaded.state.optimizers, full.optimizers);
        let mut joined = first_hist.epochs;
        joined.extend(rest.epochs);
        assert_eq!(joined, full_hist.epochs);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let (ds, hier) = small();
        let (state, _) = train_state(&ds, &hier, &config(1)).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint_to(&mut bytes, &state, &hier).unwrap();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = read_checkpoint(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, CfcbmError::Format(_)), "cut {cut}: {err}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CfcbmError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            read_checkpoint(&mut bad.as_slice()),
            Err(CfcbmError::Format(_))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            read_checkpoint(&mut long.as_slice()),
            Err(CfcbmError::Format(_))
        ));
    }

    #[test]
    fn convex_baseline_loss_does_not_increase() {
        let (ds, hier) = small();
        let cfg = TrainConfig {
            beta: 0.0,
            mode: Mode::NoDiscovery,
            batch_size: ds.n_examples(),
            epochs: 50,
            ..config(50)
        };
        let (_, history) = train(&ds, &hier, &cfg).unwrap();
        for w in history.epochs.windows(2) {
            assert!(w[1].loss.total <= w[0].loss.total + 1e-12, "{w:?}");
        }
    }

    #[test]
    fn kl_pressure_lowers_posterior_mass() {
        let (ds, hier) = small();
        let mean_q = |beta: f64| {
            let cfg = TrainConfig { beta, ..config(40) };
            let (params, _) = train(&ds, &hier, &cfg).unwrap();
            let q = crate::discovery::posterior_probs(&ds.image_embeddings, &params.w_hs).unwrap();
            q.probs.mean()
        };
        assert!(mean_q(1e-4) < mean_q(0.0));
    }

    #[test]
    fn history_has_one_bounded_entry_per_epoch() {
        let (ds, hier) = small();
        let (_, history) = train(&ds, &hier, &config(4)).unwrap();
        assert_eq!(history.epochs.len(), 4);
        for (i, e) in history.epochs.iter().enumerate() {
            assert_eq!(e.epoch, i as u64);
            assert!((0.0..=100.0).contains(&e.sparsity_high));
            assert!((0.0..=100.0).contains(&e.sparsity_low));
            assert!((0.0..=1.0).contains(&e.train_accuracy_high));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (ds, hier) = small();
        for cfg in [
            TrainConfig {
                alpha_h: 0.0,
                ..config(1)
            },
            TrainConfig {
                gumbel_temperature: 1.0,
                ..config(1)
            },
            TrainConfig {
                lr: 0.0,
                ..config(1)
            },
            TrainConfig {
                batch_size: 0,
                ..config(1)
            },
            TrainConfig {
                patches: Some(6),
                ..config(1)
            },
        ] {
            assert!(
                matches!(train(&ds, &hier, &cfg), Err(CfcbmError::Parameter(_))),
                "{cfg:?}"
            );
        }
        let cfg = TrainConfig {
            patches: Some(16),
            ..config(1)
        };
        assert!(matches!(
            train(&ds, &hier, &cfg),
            Err(CfcbmError::Validation(_))
        ));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (ds, hier) = small();
        let cfg = TrainConfig {
            lr: f64::MAX,
            ..config(3)
        };
        match train(&ds, &hier, &cfg) {
            Err(CfcbmError::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_json_fills_defaults_and_rejects_unknown_keys() {
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"epochs": 7, "mode": "low-only"}"#).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.mode, Mode::LowOnly);
        assert_eq!(cfg.beta, 1e-4);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 7}"#).is_err());
    }
}
