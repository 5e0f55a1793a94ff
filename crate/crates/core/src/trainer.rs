//! Two-stage mini-batch training and evaluation.
//!
//! Warm-up epochs update the feature head with `−R` and the cluster head with
//! the Ncut loss; fine-tune epochs use `−R + R_c + Ncut`. The affinity graph
//! is rebuilt from each batch's embeddings and treated as a constant.

use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coding_rate::{cluster_rate, rate, EmbeddingBatch};
use crate::data::{FeatureMatrix, TrainConfig};
use crate::error::{Error, Result};
use crate::graph_cut::{build_affinity, ncut_loss, spectral_oracle};
use crate::metrics::{clustering_accuracy, nmi_with};
use crate::network::{ModelParams, Mode};
use crate::optim::{lr_schedule, Adam};
use crate::tensor::Mat;

/// Rows per eval-mode forward chunk.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub rate: f64,
    pub cluster_rate: f64,
    pub ncut: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub acc_ch: Option<f64>,
    pub nmi_ch: Option<f64>,
    pub acc_sc: Option<f64>,
    pub nmi_sc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub iter: usize,
    pub node: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub iters_per_epoch: usize,
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
    pub skipped: Vec<SkipRecord>,
}

impl TrainLog {
    pub fn write_iter_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "iter,R,Rc,ncut,lr")?;
        for r in &self.iters {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", r.iter, r.rate, r.cluster_rate, r.ncut, r.lr)?;
        }
        Ok(())
    }

    pub fn write_eval_csv(&self, mut w: impl Write) -> Result<()> {
        let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(w, "epoch,acc_ch,nmi_ch,acc_sc,nmi_sc")?;
        for r in &self.evals {
            writeln!(w, "{},{},{},{},{}", r.epoch, f(r.acc_ch), f(r.nmi_ch), f(r.acc_sc), f(r.nmi_sc))?;
        }
        Ok(())
    }

    /// Mean of `field` over the iterations of `epoch` (0-based).
    pub fn epoch_mean(&self, epoch: usize, field: impl Fn(&IterRecord) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self.iters.iter().filter(|r| r.epoch == epoch).map(field).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub k: usize,
    pub labels_ch: Vec<usize>,
    /// `None` when the point count exceeds the spectral-clustering limit.
    pub labels_sc: Option<Vec<usize>>,
    pub acc_ch: Option<f64>,
    pub nmi_ch: Option<f64>,
    pub acc_sc: Option<f64>,
    pub nmi_sc: Option<f64>,
}

impl EvalReport {
    /// Cluster-head label counts, indexed by label.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.k];
        for &l in &self.labels_ch {
            h[l] += 1;
        }
        h
    }
}

/// Eval-mode embeddings (`d×N`) and memberships (`N×k`) for every point.
pub fn embed_all(model: &ModelParams, x: &Mat) -> Result<(Mat, Mat)> {
    let n = x.rows();
    let mut z = Mat::zeros(model.arch.embed_dim, n);
    let mut pi = Mat::zeros(n, model.arch.clusters);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let (out, _) = model.forward_eval(&x.select_rows(&idx))?;
        for (c, &i) in idx.iter().enumerate() {
            for r in 0..z.rows() {
                z.data_mut()[r * n + i] = out.z[(r, c)];
            }
            pi.row_mut(i).copy_from_slice(out.membership.pi().row(c));
        }
    }
    Ok((z, pi))
}

/// Cluster-head labels (row argmax of Π) and spectral clustering on the
/// affinity graph of Z, scored against labels when present.
pub fn evaluate(model: &ModelParams, data: &FeatureMatrix, cfg: &TrainConfig) -> Result<EvalReport> {
    let (z, pi) = embed_all(model, data.features())?;
    let k = model.arch.clusters;
    let labels_ch = crate::coding_rate::Membership::new_unchecked(pi).hard_labels();
    let labels_sc = if data.n_points() <= cfg.sc_max_points && data.n_points() > k {
        let g = build_affinity(&z, &cfg.affinity_config()?)?;
        match spectral_oracle(&g, k, cfg.seed) {
            Ok(l) => Some(l),
            Err(Error::DegenerateGraph { node }) => {
                warn!("spectral clustering skipped: node {node} is isolated");
                None
            }
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let mut report = EvalReport {
        n: data.n_points(),
        k,
        labels_ch,
        labels_sc,
        acc_ch: None,
        nmi_ch: None,
        acc_sc: None,
        nmi_sc: None,
    };
    if let Some(truth) = data.labels() {
        let norm = cfg.nmi_normalization;
        report.acc_ch = Some(clustering_accuracy(&report.labels_ch, truth)?);
        report.nmi_ch = Some(nmi_with(&report.labels_ch, truth, norm)?);
        if let Some(sc) = &report.labels_sc {
            report.acc_sc = Some(clustering_accuracy(sc, truth)?);
            report.nmi_sc = Some(nmi_with(sc, truth, norm)?);
        }
    }
    Ok(report)
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub log: TrainLog,
}

/// Runs warm-up then fine-tuning. Metrics are computed every `eval_every`
/// epochs on `eval_data` if given, else on `data`, whenever labels exist.
pub fn train(cfg: &TrainConfig, data: &FeatureMatrix, eval_data: Option<&FeatureMatrix>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_points = data.n_points();
    if n_points < cfg.batch_size {
        return Err(Error::param(format!(
            "{n_points} points cannot fill a batch of {}",
            cfg.batch_size
        )));
    }
    if let Some(e) = eval_data {
        if e.dim() != data.dim() {
            return Err(Error::dim(format!(
                "evaluation features have dimension {}, training features {}",
                e.dim(),
                data.dim()
            )));
        }
    }
    let aff_cfg = cfg.affinity_config()?;
    let mut model = ModelParams::new(cfg.architecture(data.dim()), cfg.seed)?;
    let mut adam = Adam::new(cfg.weight_decay, cfg.decay_mode()?);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);

    let ipe = n_points / cfg.batch_size;
    let epochs = cfg.warmup_epochs + cfg.finetune_epochs;
    let total = epochs * ipe;
    let mut log = TrainLog {
        config: cfg.clone(),
        iters_per_epoch: ipe,
        iters: Vec::with_capacity(total),
        evals: Vec::new(),
        skipped: Vec::new(),
    };
    let mut order: Vec<usize> = (0..n_points).collect();
    let eval_target = eval_data.unwrap_or(data);

    for epoch in 0..epochs {
        let finetune = epoch >= cfg.warmup_epochs;
        order.shuffle(&mut shuffle_rng);
        for b in 0..ipe {
            let t = epoch * ipe + b;
            let lr = lr_schedule(t, cfg.warmup_epochs, cfg.finetune_epochs, ipe, cfg.lr);
            let x = data.features().select_rows(&order[b * cfg.batch_size..(b + 1) * cfg.batch_size]);
            let (out, cache) = model.forward(&x, Mode::Train)?;
            let zb = EmbeddingBatch::new(out.z, cfg.eps)?;
            let r = rate(&zb)?;
            let rc = cluster_rate(&zb, &out.membership)?;
            let graph = build_affinity(zb.z(), &aff_cfg)?;
            let nc = match ncut_loss(&graph, &out.membership, cfg.gamma) {
                Ok(nc) => nc,
                Err(Error::DegenerateGraph { node }) => {
                    warn!("iteration {t}: node {node} isolated in batch affinity; batch skipped");
                    log.skipped.push(SkipRecord { iter: t, node });
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut grad_z = r.grad_z.scale(-1.0);
            let mut grad_pi = nc.grad_pi;
            if finetune {
                grad_z.add_scaled(1.0, &rc.grad_z)?;
                grad_pi.add_scaled(1.0, &rc.grad_pi)?;
            }
            let grads = model.backward(&cache, &grad_z, &grad_pi)?;
            adam.step(&mut model, &grads, lr)?;
            log.iters.push(IterRecord {
                iter: t,
                epoch,
                rate: r.value,
                cluster_rate: rc.value,
                ncut: nc.value,
                lr,
            });
        }
        if log.skipped.len() as f64 > cfg.max_skip_fraction * total as f64 {
            return Err(Error::TooManySkipped {
                skipped: log.skipped.len(),
                total,
            });
        }
        if let Some(rec) = log.iters.last().filter(|r| r.epoch == epoch) {
            info!(
                "epoch {}/{epochs} R {:.4} Rc {:.4} ncut {:.4} lr {:.2e}",
                epoch + 1,
                rec.rate,
                rec.cluster_rate,
                rec.ncut,
                rec.lr
            );
        }
        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 && eval_target.labels().is_some() {
            let rep = evaluate(&model, eval_target, cfg)?;
            info!(
                "epoch {} acc_ch {:?} nmi_ch {:?} acc_sc {:?} nmi_sc {:?}",
                epoch + 1,
                rep.acc_ch,
                rep.nmi_ch,
                rep.acc_sc,
                rep.nmi_sc
            );
            log.evals.push(EvalRecord {
                epoch,
                acc_ch: rep.acc_ch,
                nmi_ch: rep.nmi_ch,
                acc_sc: rep.acc_sc,
                nmi_sc: rep.nmi_sc,
            });
        }
    }
    Ok(TrainOutcome { model, log })
}
