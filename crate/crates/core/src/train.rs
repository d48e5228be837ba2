//! Training: Adam + softmax cross-entropy over pixel-centered patches,
//! with seeded shuffling, per-epoch loss logging, checkpointing, and the
//! per-route ablation harness.
//!
//! Determinism: the split, parameter init, and epoch shuffles all derive
//! from `seed`; per-sample gradients inside a batch are reduced in sample
//! order, so trajectories are bit-reproducible regardless of the rayon
//! thread count.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{self, ModelConfig, ParamStore, BN_MOMENTUM};
use crate::data::{self, HsiCube};
use crate::error::{Error, Result};
use crate::eval;
use crate::graph::{Graph, Mode};
use crate::routes::RouteId;
use crate::tensor::Tensor;
use crate::Real;

/// Experiment configuration; the JSON config file carries exactly these
/// field names and rejects unknown keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: String,
    pub patch_size: usize,
    pub pca_dim: usize,
    pub route: RouteId,
    pub embed_dim: usize,
    pub depth: usize,
    pub state_size: usize,
    pub expansion: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Real,
    pub seed: u64,
    pub train_fraction: Real,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: String::new(),
            patch_size: 13,
            pca_dim: 30,
            route: RouteId::ParallelSpectralSpatial,
            embed_dim: 32,
            depth: 1,
            state_size: 16,
            expansion: 2,
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.001,
            seed: 0,
            train_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "train_fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        ModelConfig {
            classes,
            patch_size: self.patch_size,
            bands: self.pca_dim,
            embed_dim: self.embed_dim,
            depth: self.depth,
            state_size: self.state_size,
            expansion: self.expansion,
            route: self.route,
        }
    }
}

/// Parse a config file; unknown keys are an error, not a silent typo.
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Adam with bias correction; beta1 0.9, beta2 0.999, eps 1e-8.
pub struct Adam {
    lr: Real,
    beta1: Real,
    beta2: Real,
    eps: Real,
    t: u64,
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: Real) -> Adam {
        let m = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        let v = store.entries().iter().map(|e| vec![0.0; e.tensor.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// Apply one update from per-entry gradients (already batch-averaged).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<Real>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            if !store.entry(i).trainable {
                continue;
            }
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
            store.update_data(i, |w| {
                for j in 0..w.len() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                    v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    w[j] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub final_loss: Real,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    model: ModelConfig,
    class_names: Vec<String>,
    params: Vec<ParamHeader>,
    metadata: CheckpointMeta,
}

/// Architecture config plus the flat parameter payload; immutable once
/// written, reloadable bit-exactly.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    pub store: ParamStore,
    pub metadata: CheckpointMeta,
}

impl ModelCheckpoint {
    /// Serialize as a length-prefixed JSON header followed by the f64
    /// little-endian payload in parameter order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            model: self.model.clone(),
            class_names: self.class_names.clone(),
            params: self
                .store
                .entries()
                .iter()
                .map(|e| ParamHeader {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    trainable: e.trainable,
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::format(format!("checkpoint header encode: {e}")))?;
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let len = u32::try_from(header_bytes.len())
            .map_err(|_| Error::format("checkpoint header too large"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for value in self.store.flat_payload() {
            w.write_all(&value.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
        let file = File::open(path)?;
        let mut r = BufReader::new(file);
        let mut len_buf = [0u8; 4];
        r.read_exact(&mut len_buf)
            .map_err(|_| Error::format("truncated checkpoint header length"))?;
        let header_len = u32::from_le_bytes(len_buf) as usize;
        let mut header_buf = vec![0u8; header_len];
        r.read_exact(&mut header_buf)
            .map_err(|_| Error::format("truncated checkpoint header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_buf)
            .map_err(|e| Error::format(format!("bad checkpoint header: {e}")))?;

        let declared: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let mut payload_bytes = Vec::new();
        r.read_to_end(&mut payload_bytes)?;
        if payload_bytes.len() != declared * 8 {
            return Err(Error::format(format!(
                "checkpoint payload holds {} bytes, declared shapes need {}",
                payload_bytes.len(),
                declared * 8
            )));
        }
        let payload: Vec<Real> = payload_bytes
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut store = ParamStore::new();
        let mut off = 0;
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let tensor = Tensor::new(p.shape.clone(), payload[off..off + n].to_vec())?;
            store.add(&p.name, tensor, p.trainable);
            off += n;
        }
        Ok(ModelCheckpoint {
            config: header.config,
            model: header.model,
            class_names: header.class_names,
            store,
            metadata: header.metadata,
        })
    }
}

pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub epoch_losses: Vec<Real>,
}

struct SampleGrads {
    loss: Real,
    grads: Vec<(usize, Vec<Real>)>,
    bn_mean: Vec<Real>,
    bn_var: Vec<Real>,
}

fn forward_backward(
    model: &ModelConfig,
    store: &ParamStore,
    patch: &Tensor,
    target: usize,
) -> Result<SampleGrads> {
    let mut g = Graph::new(Mode::Train);
    let nodes = blocks::build_forward(&mut g, model, store, patch)?;
    let loss = g.cross_entropy_logits(nodes.logits, target)?;
    g.backward(loss)?;
    let (bn_mean, bn_var) = g
        .bn_batch_stats(nodes.bn)
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .unwrap_or_default();
    Ok(SampleGrads {
        loss: g.value(loss).data()[0],
        grads: g.param_grads().map(|(s, gr)| (s, gr.to_vec())).collect(),
        bn_mean,
        bn_var,
    })
}

/// Train on an already-loaded cube; `progress` sees (epoch, mean loss).
pub fn train_on_cube(
    cfg: &TrainConfig,
    cube: &HsiCube,
    mut progress: impl FnMut(usize, Real),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = cube.num_classes();
    if classes == 0 {
        return Err(Error::invalid("dataset declares no classes"));
    }
    let model = cfg.model_config(classes);
    model.validate()?;
    if cfg.pca_dim > cube.bands {
        return Err(Error::invalid(format!(
            "pca_dim {} exceeds {} bands",
            cfg.pca_dim, cube.bands
        )));
    }

    let reduced = data::pca_reduce(cube, cfg.pca_dim)?;
    let split = data::stratified_split(&cube.labels, cfg.train_fraction, cfg.seed)?;

    // Conv-layout inputs are fixed per sample; build them once.
    let samples: Vec<(Tensor, usize)> = split
        .train_indices
        .iter()
        .map(|&px| {
            let (row, col) = (px / cube.width, px % cube.width);
            let raw = data::extract_patch(&reduced, row, col, cfg.patch_size);
            let tensor = blocks::patch_to_conv_input(&raw, cfg.patch_size, cfg.pca_dim)?;
            Ok((tensor, (cube.labels[px] - 1) as usize))
        })
        .collect::<Result<_>>()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut store = blocks::init_params(&model, &mut init_rng)?;
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD1B5_4A32_D192_ED03);

    let rm_idx = store.idx("sstg.bn.running_mean")?;
    let rv_idx = store.idx("sstg.bn.running_var")?;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<SampleGrads> = batch
                .par_iter()
                .map(|&si| forward_backward(&model, &store, &samples[si].0, samples[si].1))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite { op } => Error::non_finite(&format!("epoch {epoch}: {op}")),
                    other => other,
                })?;

            // Mean-over-batch loss, gradients reduced in sample order.
            let bf = batch.len() as Real;
            let mut grads: Vec<Vec<Real>> = store
                .entries()
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect();
            for r in &results {
                epoch_loss_sum += r.loss;
                for (slot, g) in &r.grads {
                    let acc = &mut grads[*slot];
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v /= bf;
                }
            }
            adam.step(&mut store, &grads);

            // Running batch-norm statistics, updated in sample order.
            for r in &results {
                store.update_data(rm_idx, |rm| {
                    for (a, b) in rm.iter_mut().zip(&r.bn_mean) {
                        *a = BN_MOMENTUM * *a + (1.0 - BN_MOMENTUM) * b;
                    }
                });
                store.update_data(rv_idx, |rv| {
                    for (a, b) in rv.iter_mut().zip(&r.bn_var) {
                        *a = BN_MOMENTUM * *a + (1.0 - BN_MOMENTUM) * b;
                    }
                });
            }
        }
        let mean_loss = epoch_loss_sum / samples.len() as Real;
        if !mean_loss.is_finite() {
            return Err(Error::non_finite(&format!("epoch {epoch}: mean loss")));
        }
        epoch_losses.push(mean_loss);
        progress(epoch, mean_loss);
    }

    let final_loss = epoch_losses.last().copied().unwrap_or(Real::NAN);
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint {
            config: cfg.clone(),
            model,
            class_names: cube.class_names.clone(),
            store,
            metadata: CheckpointMeta {
                epoch: cfg.epochs,
                final_loss,
                seed: cfg.seed,
            },
        },
        epoch_losses,
    })
}

/// Load the dataset named by the config and train.
pub fn train(cfg: &TrainConfig, progress: impl FnMut(usize, Real)) -> Result<TrainOutcome> {
    if cfg.dataset.is_empty() {
        return Err(Error::invalid("config has no dataset path"));
    }
    let cube = data::load_cube(&cfg.dataset)?;
    train_on_cube(cfg, &cube, progress)
}

#[derive(Clone, Debug)]
pub struct RouteRow {
    pub route: RouteId,
    pub seeds: Vec<u64>,
    pub oa: Real,
    pub aa: Real,
    pub kappa: Real,
    pub error: Option<String>,
}

/// Train one model per route (everything else fixed, same seed set) and
/// report mean OA/AA/kappa. A failing route reports its error and the
/// remaining rows still run.
pub fn route_ablation(
    base: &TrainConfig,
    cube: &HsiCube,
    n_seeds: usize,
    mut progress: impl FnMut(RouteId, u64),
) -> Result<Vec<RouteRow>> {
    if n_seeds == 0 {
        return Err(Error::invalid("route_ablation needs at least one seed"));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base.seed + i).collect();
    let mut rows = Vec::with_capacity(5);
    for route in RouteId::all() {
        let mut oa_sum = 0.0;
        let mut aa_sum = 0.0;
        let mut kappa_sum = 0.0;
        let mut error = None;
        for &seed in &seeds {
            progress(route, seed);
            let cfg = TrainConfig {
                route,
                seed,
                ..base.clone()
            };
            let run = train_on_cube(&cfg, cube, |_, _| {}).and_then(|out| {
                let split = data::stratified_split(&cube.labels, cfg.train_fraction, seed)?;
                eval::evaluate_checkpoint(&out.checkpoint, cube, &split)
            });
            match run {
                Ok(result) => {
                    oa_sum += result.report.oa;
                    aa_sum += result.report.aa;
                    kappa_sum += result.report.kappa;
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let n = seeds.len() as Real;
        rows.push(if error.is_none() {
            RouteRow {
                route,
                seeds: seeds.clone(),
                oa: oa_sum / n,
                aa: aa_sum / n,
                kappa: kappa_sum / n,
                error: None,
            }
        } else {
            RouteRow {
                route,
                seeds: seeds.clone(),
                oa: Real::NAN,
                aa: Real::NAN,
                kappa: Real::NAN,
                error,
            }
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[RouteRow]) -> String {
    let mut out = String::from("route,seeds,oa,aa,kappa,error\n");
    for r in rows {
        let seeds = r
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{}\n",
            r.route,
            seeds,
            r.oa,
            r.aa,
            r.kappa,
            r.error.as_deref().unwrap_or("")
        ));
    }
    out
}

pub fn ablation_table(rows: &[RouteRow]) -> String {
    let mut out = format!(
        "{:<28} {:>8} {:>8} {:>8}  {}\n",
        "route", "OA", "AA", "kappa", "status"
    );
    for r in rows {
        let status = r.error.as_deref().unwrap_or("ok");
        out.push_str(&format!(
            "{:<28} {:>8.4} {:>8.4} {:>8.4}  {}\n",
            r.route.name(),
            r.oa,
            r.aa,
            r.kappa,
            status
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            dataset: String::new(),
            patch_size: 5,
            pca_dim: 4,
            route: RouteId::SpatialPriority,
            embed_dim: 2,
            depth: 1,
            state_size: 2,
            expansion: 2,
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.001,
            seed: 0,
            train_fraction: 0.2,
        }
    }

    fn tiny_cube() -> HsiCube {
        synth_dataset(2, 10, 10, 6, 0.05, 11).unwrap()
    }

    #[test]
    fn config_json_round_trip_and_unknown_key_rejection() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let bad = r#"{"dataset": "x.hsic", "patchsize": 9}"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
    }

    #[test]
    fn defaults_match_experiment_protocol() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.pca_dim, 30);
        assert_eq!(cfg.state_size, 16);
        assert_eq!(cfg.expansion, 2);
        assert_eq!(cfg.embed_dim, 32);
        assert_eq!(cfg.depth, 1);
        assert_eq!(cfg.route, RouteId::ParallelSpectralSpatial);
        assert_eq!(cfg.patch_size, 13);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let cube = tiny_cube();
        let mut cfg = tiny_train_cfg();
        cfg.learning_rate = 0.0;
        cfg.epochs = 0;
        let before = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        cfg.epochs = 3;
        let after = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        // Trainable parameters identical; only batch-norm running stats move.
        for (a, b) in before
            .checkpoint
            .store
            .entries()
            .iter()
            .zip(after.checkpoint.store.entries())
        {
            if a.trainable {
                assert_eq!(a.tensor.data(), b.tensor.data(), "{} moved", a.name);
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cube = tiny_cube();
        let cfg = tiny_train_cfg();
        let a = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        let b = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        for (x, y) in a
            .checkpoint
            .store
            .entries()
            .iter()
            .zip(b.checkpoint.store.entries())
        {
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
    }

    #[test]
    fn single_sample_overfits_to_its_label() {
        // One labeled pixel, 200 steps: the model must classify it right.
        let mut cube = tiny_cube();
        cube.labels.iter_mut().for_each(|l| *l = 0);
        cube.labels[55] = 2;
        let mut cfg = tiny_train_cfg();
        cfg.train_fraction = 1.0;
        cfg.epochs = 200;
        cfg.batch_size = 1;
        let out = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();

        let reduced = data::pca_reduce(&cube, cfg.pca_dim).unwrap();
        let raw = data::extract_patch(&reduced, 5, 5, cfg.patch_size);
        let probs =
            blocks::model_forward(&out.checkpoint.model, &out.checkpoint.store, &raw).unwrap();
        assert_eq!(blocks::argmax(&probs), 1, "probs {probs:?}");
        assert!(out.epoch_losses.last().unwrap() < &0.05);
    }

    #[test]
    fn loss_trends_down_on_separable_synth_data() {
        let cube = tiny_cube();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 10;
        let out = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        assert!(
            out.epoch_losses[9] < out.epoch_losses[0],
            "losses {:?}",
            out.epoch_losses
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cube = tiny_cube();
        let cfg = tiny_train_cfg();
        let out = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let loaded = ModelCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.config, out.checkpoint.config);
        assert_eq!(loaded.metadata, out.checkpoint.metadata);
        assert_eq!(loaded.class_names, out.checkpoint.class_names);
        for (a, b) in out
            .checkpoint
            .store
            .entries()
            .iter()
            .zip(loaded.store.entries())
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn corrupt_checkpoint_payload_is_rejected() {
        let cube = tiny_cube();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 0;
        let out = train_on_cube(&cfg, &cube, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        out.checkpoint.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(ModelCheckpoint::load(&path).is_err());
    }

    #[test]
    fn ablation_emits_five_rows_and_is_deterministic() {
        let cube = synth_dataset(2, 8, 8, 6, 0.05, 13).unwrap();
        let mut cfg = tiny_train_cfg();
        cfg.epochs = 1;
        cfg.train_fraction = 0.3;
        let rows = route_ablation(&cfg, &cube, 1, |_, _| {}).unwrap();
        assert_eq!(rows.len(), 5);
        let rows2 = route_ablation(&cfg, &cube, 1, |_, _| {}).unwrap();
        for (a, b) in rows.iter().zip(&rows2) {
            assert_eq!(a.route, b.route);
            assert_eq!(a.oa, b.oa);
            assert_eq!(a.aa, b.aa);
            assert_eq!(a.kappa, b.kappa);
        }
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 6);
    }
}
