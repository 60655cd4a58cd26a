//! Two-phase training: coarse branches first (fine loss weight zero),
//! then the fine branch, with plain SGD + momentum and per-epoch
//! loss/accuracy records.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cvt::MultiLevelLabel;
use crate::error::{Error, Result};
use crate::ingest::softmax;
use crate::vtnet::net::{fine_loss, VtNet};
use crate::vtnet::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_INITIAL_LR: f64 = 0.003;

/// Initial learning rate plus (epoch, value) change points within a phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub changes: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial: lr,
            changes: Vec::new(),
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.initial;
        for &(e, v) in &self.changes {
            if epoch >= e {
                lr = v;
            }
        }
        lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPhase {
    pub loss_weights: Vec<f64>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub shuffle_seed: u64,
}

impl TrainPhase {
    /// Phase 1: equal weights on the coarse branches, zero on the fine.
    pub fn coarse(num_branches: usize, epochs: usize) -> Self {
        let mut w = vec![0.0; num_branches];
        if num_branches > 1 {
            for v in &mut w[..num_branches - 1] {
                *v = 1.0 / (num_branches - 1) as f64;
            }
        } else {
            w[0] = 1.0;
        }
        TrainPhase {
            loss_weights: w,
            epochs,
            lr: LrSchedule::constant(DEFAULT_INITIAL_LR),
            batch_size: DEFAULT_BATCH_SIZE,
            shuffle_seed: 1,
        }
    }

    /// Phase 2: all weight on the fine branch.
    pub fn fine(num_branches: usize, epochs: usize) -> Self {
        let mut w = vec![0.0; num_branches];
        w[num_branches - 1] = 1.0;
        TrainPhase {
            loss_weights: w,
            epochs,
            lr: LrSchedule::constant(DEFAULT_INITIAL_LR),
            batch_size: DEFAULT_BATCH_SIZE,
            shuffle_seed: 2,
        }
    }

    fn validate(&self, num_branches: usize) -> Result<()> {
        if self.loss_weights.len() != num_branches {
            return Err(Error::Config(format!(
                "phase declares {} loss weights for {num_branches} branches",
                self.loss_weights.len()
            )));
        }
        if self.loss_weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One metrics row per (phase, epoch, branch).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub phase: usize,
    pub epoch: usize,
    pub branch: usize,
    pub loss: f64,
    pub top1: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("phase,epoch,branch,loss,top1\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.phase, r.epoch, r.branch, r.loss, r.top1);
    }
    out
}

/// Run the phases in order with SGD + momentum. Deterministic for a
/// fixed seed; aborts with the epoch index if the loss turns non-finite.
pub fn train(
    net: &mut VtNet,
    dataset: &[(Tensor, MultiLevelLabel)],
    phases: &[TrainPhase],
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let k = net.num_branches();
    for phase in phases {
        phase.validate(k)?;
    }
    if dataset.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }

    let mut velocity: Vec<Vec<f64>> = net
        .layers_mut()
        .iter()
        .map(|l| vec![0.0; l.params.len()])
        .collect();
    let mut rows = Vec::new();

    for (phase_idx, phase) in phases.iter().enumerate() {
        for epoch in 0..phase.epochs {
            let lr = phase.lr.at_epoch(epoch);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ phase.shuffle_seed.wrapping_mul(0x9e3779b97f4a7c15) ^ (epoch as u64) << 17,
            );
            order.shuffle(&mut rng);

            for chunk in order.chunks(phase.batch_size) {
                let batch: Vec<(Tensor, MultiLevelLabel)> = chunk
                    .iter()
                    .map(|&i| dataset[i].clone())
                    .collect();
                net.zero_grads();
                let loss = net.backward_batch(&batch, &phase.loss_weights)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "training diverged at phase {phase_idx} epoch {epoch}"
                    )));
                }
                for (layer, vel) in net.layers_mut().into_iter().zip(&mut velocity) {
                    for ((p, g), v) in layer.params.iter_mut().zip(&layer.grads).zip(vel.iter_mut()) {
                        *v = DEFAULT_MOMENTUM * *v - lr * g;
                        *p += *v;
                    }
                }
            }

            let epoch_rows = epoch_metrics(net, dataset, phase_idx, epoch)?;
            rows.extend(epoch_rows);
        }
    }
    Ok(rows)
}

fn epoch_metrics(
    net: &mut VtNet,
    dataset: &[(Tensor, MultiLevelLabel)],
    phase: usize,
    epoch: usize,
) -> Result<Vec<MetricRow>> {
    let k = net.num_branches();
    let mode = net.config().fine_loss_mode;
    let n = dataset.len() as f64;
    let mut losses = vec![0.0; k];
    let mut hits = vec![0usize; k];
    for (x, label) in dataset {
        let out = net.forward(x)?;
        for b in 0..k {
            let y = label.targets[b];
            if b + 1 < k {
                let logits = &out.logits[b];
                losses[b] += crate::vtnet::net::log_sum_exp(logits) - logits[y];
                if argmax(logits) == y {
                    hits[b] += 1;
                }
            } else {
                losses[b] += fine_loss(&[out.averaged.clone()], &[y], 1.0, mode)?;
                if argmax(&out.averaged) == y {
                    hits[b] += 1;
                }
            }
        }
    }
    Ok((0..k)
        .map(|b| MetricRow {
            phase,
            epoch,
            branch: b + 1,
            loss: losses[b] / n,
            top1: hits[b] as f64 / n,
        })
        .collect())
}

/// Top-1 accuracy per branch; the fine branch is scored on the argmax
/// of the averaged prediction. Ties break toward the lowest index.
pub fn evaluate(net: &mut VtNet, dataset: &[(Tensor, MultiLevelLabel)]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Precondition("empty evaluation set".into()));
    }
    let k = net.num_branches();
    let mut hits = vec![0usize; k];
    for (x, label) in dataset {
        let out = net.forward(x)?;
        if label.targets.len() != k {
            return Err(Error::Precondition(format!(
                "sample {} has {} targets, expected {k}",
                label.sample_id,
                label.targets.len()
            )));
        }
        for b in 0..k {
            let pred = if b + 1 < k {
                argmax(&out.logits[b])
            } else {
                argmax(&out.averaged)
            };
            if pred == label.targets[b] {
                hits[b] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / dataset.len() as f64).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy of a plain single-head classifier over
/// the same data; reference for the reduction sanity check.
pub fn plain_classifier_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    for (l, &y) in logits.iter().zip(targets) {
        let p = softmax(l)?;
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
    }
    Ok(loss / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vtnet::layers::LayerSpec;
    use crate::vtnet::net::{FineLossMode, VtNetConfig};

    fn label(targets: Vec<usize>) -> MultiLevelLabel {
        MultiLevelLabel {
            sample_id: "s".into(),
            targets,
        }
    }

    fn toy_net(seed: u64) -> VtNet {
        VtNet::build(
            VtNetConfig {
                input_shape: vec![2],
                base: vec![LayerSpec::Affine { out_dim: 8 }, LayerSpec::Relu],
                taps: vec![1],
                branch_stacks: vec![vec![], vec![]],
                head_sizes: vec![2, 4],
                fine_loss_mode: FineLossMode::Literal,
                seed,
            },
            vec![0, 0, 1, 1],
        )
        .unwrap()
    }

    fn toy_data() -> Vec<(Tensor, MultiLevelLabel)> {
        // Four well-separated classes in 2-D, pairs sharing a sign of x.
        let mut data = Vec::new();
        // Unit-scale inputs: the literal fine loss has gradient scaled by
        // the predicted fine probability, so a softmax saturated at
        // initialization cannot recover.
        let centers = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
        for (c, &(x, y)) in centers.iter().enumerate() {
            for d in 0..6 {
                let jitter = d as f64 * 0.03;
                data.push((
                    Tensor::from_vec(&[2], vec![x + jitter, y - jitter]).unwrap(),
                    label(vec![c / 2, c]),
                ));
            }
        }
        data
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut net = toy_net(3);
        let before = net.flat_params();
        let phases = [TrainPhase::coarse(2, 0), TrainPhase::fine(2, 0)];
        let rows = train(&mut net, &toy_data(), &phases, 9).unwrap();
        assert!(rows.is_empty());
        assert_eq!(net.flat_params(), before);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let run = || {
            let mut net = toy_net(3);
            let phases = [TrainPhase::coarse(2, 3), TrainPhase::fine(2, 3)];
            let rows = train(&mut net, &toy_data(), &phases, 9).unwrap();
            (net.flat_params(), rows)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn two_phase_training_learns_separable_data() {
        let mut net = toy_net(3);
        let mut p1 = TrainPhase::coarse(2, 10);
        p1.lr = LrSchedule::constant(0.02);
        let mut p2 = TrainPhase::fine(2, 60);
        p2.lr = LrSchedule::constant(0.1);
        train(&mut net, &toy_data(), &[p1, p2], 9).unwrap();
        let acc = evaluate(&mut net, &toy_data()).unwrap();
        assert!(acc[0] > 0.95, "coarse accuracy {}", acc[0]);
        assert!(acc[1] > 0.95, "fine accuracy {}", acc[1]);
    }

    #[test]
    fn phase_one_never_touches_fine_branch_parameters() {
        let mut net = toy_net(3);
        let (base_len, branch_lens) = net.param_layout();
        let fine_start = base_len + branch_lens[..branch_lens.len() - 1].iter().sum::<usize>();
        let before = net.flat_params()[fine_start..].to_vec();
        let phase = TrainPhase::coarse(2, 4);
        train(&mut net, &toy_data(), &[phase], 9).unwrap();
        let after = net.flat_params()[fine_start..].to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn untrained_zero_net_scores_as_constant_predictor() {
        let mut net = toy_net(3);
        let zeros = vec![0.0; net.flat_params().len()];
        net.set_flat_params(&zeros).unwrap();
        let acc = evaluate(&mut net, &toy_data()).unwrap();
        // All-zero logits predict class 0 everywhere; the data is balanced.
        assert!((acc[0] - 0.5).abs() < 1e-12);
        assert!((acc[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let mut net = toy_net(3);
        assert!(matches!(
            evaluate(&mut net, &[]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn lr_schedule_change_points() {
        let lr = LrSchedule {
            initial: 0.003,
            changes: vec![(40, 0.0005), (50, 0.0001)],
        };
        assert_eq!(lr.at_epoch(0), 0.003);
        assert_eq!(lr.at_epoch(39), 0.003);
        assert_eq!(lr.at_epoch(40), 0.0005);
        assert_eq!(lr.at_epoch(55), 0.0001);
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricRow {
            phase: 0,
            epoch: 1,
            branch: 2,
            loss: 0.5,
            top1: 0.75,
        }];
        assert_eq!(metrics_to_csv(&rows), "phase,epoch,branch,loss,top1\n0,1,2,0.5,0.75\n");
    }
}
