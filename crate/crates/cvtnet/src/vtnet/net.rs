//! The branch network: shared base layers with per-branch taps, one
//! class-score head per tree level, the probabilistic averaging of the
//! fine prediction by the deepest coarse branch, and hand-written
//! reverse-mode gradients for the combined loss.

use crate::cvt::MultiLevelLabel;
use crate::error::{Error, Result};
use crate::ingest::softmax;
use crate::vtnet::layers::{Layer, LayerSpec};
use crate::vtnet::tensor::Tensor;

/// Guard for the probabilistic-average denominator.
const DEGENERATE_DENOM: f64 = 1e-30;

/// How the fine-branch loss treats the averaged prediction `f`:
/// `Literal` applies a softmax over the already-normalized f before the
/// log, `LogF` takes -log f directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FineLossMode {
    Literal,
    LogF,
}

impl FineLossMode {
    pub fn to_text(self) -> &'static str {
        match self {
            FineLossMode::Literal => "literal",
            FineLossMode::LogF => "log_f",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(FineLossMode::Literal),
            "log_f" => Ok(FineLossMode::LogF),
            other => Err(Error::Config(format!("unknown fine_loss mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VtNetConfig {
    pub input_shape: Vec<usize>,
    pub base: Vec<LayerSpec>,
    /// Base-layer index each coarse branch attaches after (the branch
    /// consumes the activation produced by that many base layers).
    /// Length K-1, non-decreasing; the fine branch taps the full base.
    pub taps: Vec<usize>,
    /// Layer stack per branch, before the class-score head.
    pub branch_stacks: Vec<Vec<LayerSpec>>,
    /// Head width per branch; the last entry is the fine category count.
    pub head_sizes: Vec<usize>,
    pub fine_loss_mode: FineLossMode,
    pub seed: u64,
}

impl VtNetConfig {
    pub fn num_branches(&self) -> usize {
        self.head_sizes.len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.num_branches();
        if k == 0 {
            return Err(Error::Config("network needs at least one branch".into()));
        }
        if self.branch_stacks.len() != k {
            return Err(Error::Config(format!(
                "expected {k} branch stacks, got {}",
                self.branch_stacks.len()
            )));
        }
        if self.taps.len() != k - 1 {
            return Err(Error::Config(format!(
                "expected {} taps for {k} branches, got {}",
                k - 1,
                self.taps.len()
            )));
        }
        if self.taps.iter().any(|&t| t > self.base.len()) {
            return Err(Error::Config("tap index outside the base stack".into()));
        }
        if self.taps.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(
                "taps must be non-decreasing: shallower branches tap earlier layers".into(),
            ));
        }
        Ok(())
    }
}

/// One branch: tap point into the base plus its own stack ending in an
/// affine class-score head.
#[derive(Debug, Clone)]
struct Branch {
    tap: usize,
    stack: Vec<Layer>,
    head: Layer,
}

#[derive(Debug, Clone)]
pub struct VtNet {
    config: VtNetConfig,
    base: Vec<Layer>,
    branches: Vec<Branch>,
    /// Fine category index -> class index in the deepest coarse branch.
    parent_map: Vec<usize>,
}

/// Everything the forward pass produces for one sample.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    /// Per-branch class scores (logits), coarse to fine.
    pub logits: Vec<Vec<f64>>,
    /// Softmax of the fine branch's logits (f^K).
    pub fine_softmax: Vec<f64>,
    /// Softmax of the deepest coarse branch, when K > 1.
    pub coarse_probs: Option<Vec<f64>>,
    /// The averaged prediction f; equals `fine_softmax` when K = 1.
    pub averaged: Vec<f64>,
}

impl VtNet {
    pub fn build(config: VtNetConfig, parent_map: Vec<usize>) -> Result<VtNet> {
        config.validate()?;
        let k = config.num_branches();
        let c = config.head_sizes[k - 1];
        if parent_map.len() != c {
            return Err(Error::Config(format!(
                "parent map covers {} categories, fine head has {c}",
                parent_map.len()
            )));
        }
        if k > 1 {
            let coarse = config.head_sizes[k - 2];
            if parent_map.iter().any(|&p| p >= coarse) {
                return Err(Error::Config(
                    "parent map points outside the deepest coarse head".into(),
                ));
            }
        }

        let mut seed = config.seed;
        let mut next_seed = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            seed
        };

        let mut base = Vec::with_capacity(config.base.len());
        let mut shape = config.input_shape.clone();
        let mut base_shapes = vec![shape.clone()];
        for spec in &config.base {
            let layer = Layer::build(spec.clone(), &shape, next_seed())?;
            shape = layer.out_shape.clone();
            base_shapes.push(shape.clone());
            base.push(layer);
        }

        let mut branches = Vec::with_capacity(k);
        for b in 0..k {
            let tap = if b + 1 < k { config.taps[b] } else { config.base.len() };
            let mut shape = base_shapes[tap].clone();
            let mut stack = Vec::new();
            for spec in &config.branch_stacks[b] {
                let layer = Layer::build(spec.clone(), &shape, next_seed())?;
                shape = layer.out_shape.clone();
                stack.push(layer);
            }
            if shape.len() != 1 {
                let flatten = Layer::build(LayerSpec::Flatten, &shape, 0)?;
                shape = flatten.out_shape.clone();
                stack.push(flatten);
            }
            let head = Layer::build(
                LayerSpec::Affine {
                    out_dim: config.head_sizes[b],
                },
                &shape,
                next_seed(),
            )?;
            branches.push(Branch { tap, stack, head });
        }

        Ok(VtNet {
            config,
            base,
            branches,
            parent_map,
        })
    }

    pub fn config(&self) -> &VtNetConfig {
        &self.config
    }

    pub fn parent_map(&self) -> &[usize] {
        &self.parent_map
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Evaluate the base once, then every branch off its tap.
    pub fn forward(&mut self, x: &Tensor) -> Result<BranchOutputs> {
        let mut acts = Vec::with_capacity(self.base.len() + 1);
        acts.push(x.clone());
        for layer in &mut self.base {
            let out = layer.forward(acts.last().unwrap())?;
            acts.push(out);
        }
        let mut logits = Vec::with_capacity(self.branches.len());
        for branch in &mut self.branches {
            let mut a = acts[branch.tap].clone();
            for layer in &mut branch.stack {
                a = layer.forward(&a)?;
            }
            logits.push(branch.head.forward(&a)?.data);
        }
        let k = logits.len();
        let fine_softmax = softmax(&logits[k - 1])?;
        let (coarse_probs, averaged) = if k > 1 {
            let cp = softmax(&logits[k - 2])?;
            let f = prob_average(&cp, &fine_softmax, &self.parent_map)?;
            (Some(cp), f)
        } else {
            (None, fine_softmax.clone())
        };
        Ok(BranchOutputs {
            logits,
            fine_softmax,
            coarse_probs,
            averaged,
        })
    }

    /// Combined loss of one batch, forward only.
    pub fn batch_loss(
        &mut self,
        batch: &[(Tensor, MultiLevelLabel)],
        loss_weights: &[f64],
    ) -> Result<f64> {
        let outputs: Vec<BranchOutputs> = batch
            .iter()
            .map(|(x, _)| self.forward(x))
            .collect::<Result<_>>()?;
        let labels: Vec<MultiLevelLabel> = batch.iter().map(|(_, l)| l.clone()).collect();
        let lc = coarse_loss(&outputs, &labels, loss_weights)?;
        let lf = fine_loss_from_outputs(
            &outputs,
            &labels,
            loss_weights[loss_weights.len() - 1],
            self.config.fine_loss_mode,
        )?;
        Ok(lc + lf)
    }

    /// Forward + reverse over a batch, accumulating parameter gradients
    /// of (coarse loss + fine loss) into the layers. Returns the loss.
    ///
    /// The batch mean is handled by scaling each per-sample gradient by
    /// 1/n, so zero loss weights yield exactly zero gradients.
    pub fn backward_batch(
        &mut self,
        batch: &[(Tensor, MultiLevelLabel)],
        loss_weights: &[f64],
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let k = self.num_branches();
        if loss_weights.len() != k {
            return Err(Error::Precondition(format!(
                "expected {k} loss weights, got {}",
                loss_weights.len()
            )));
        }
        let n = batch.len() as f64;
        let mut total_loss = 0.0;
        for (x, label) in batch {
            if label.targets.len() != k {
                return Err(Error::Precondition(format!(
                    "sample {} has {} targets, expected {k}",
                    label.sample_id,
                    label.targets.len()
                )));
            }
            let outputs = self.forward(x)?;
            let (loss, dlogits) =
                per_sample_loss_and_logit_grads(&outputs, label, loss_weights, self.config.fine_loss_mode, &self.parent_map)?;
            total_loss += loss / n;

            // Reverse through branches into the base taps.
            let mut tap_grads: Vec<Option<Tensor>> = vec![None; self.base.len() + 1];
            for (b, branch) in self.branches.iter_mut().enumerate() {
                let scaled: Vec<f64> = dlogits[b].iter().map(|g| g / n).collect();
                let mut g = branch
                    .head
                    .backward(&Tensor::from_vec(&branch.head.out_shape, scaled)?)?;
                for layer in branch.stack.iter_mut().rev() {
                    g = layer.backward(&g)?;
                }
                match &mut tap_grads[branch.tap] {
                    Some(acc) => {
                        for (a, v) in acc.data.iter_mut().zip(&g.data) {
                            *a += v;
                        }
                    }
                    None => tap_grads[branch.tap] = Some(g),
                }
            }
            // Reverse through the base, folding in tap gradients.
            let mut g = tap_grads[self.base.len()]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.base.last().map_or(&self.config.input_shape[..], |l| &l.out_shape)));
            for (i, layer) in self.base.iter_mut().enumerate().rev() {
                g = layer.backward(&g)?;
                if let Some(tg) = tap_grads[i].take() {
                    for (a, v) in g.data.iter_mut().zip(&tg.data) {
                        *a += v;
                    }
                }
            }
        }
        if !total_loss.is_finite() {
            return Err(Error::Numeric("non-finite batch loss".into()));
        }
        Ok(total_loss)
    }

    pub fn zero_grads(&mut self) {
        for layer in self.layers_mut() {
            layer.zero_grads();
        }
    }

    /// All layers in a fixed order: base first, then each branch's
    /// stack and head, coarse to fine.
    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut out: Vec<&mut Layer> = self.base.iter_mut().collect();
        for branch in &mut self.branches {
            out.extend(branch.stack.iter_mut());
            out.push(&mut branch.head);
        }
        out
    }

    /// Flat copy of every parameter, in `layers_mut` order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend_from_slice(&layer.params);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        let expect: usize = self.layers().iter().map(|l| l.params.len()).sum();
        if params.len() != expect {
            return Err(Error::Precondition(format!(
                "expected {expect} parameters, got {}",
                params.len()
            )));
        }
        let mut offset = 0;
        for layer in self.layers_mut() {
            let len = layer.params.len();
            layer.params.copy_from_slice(&params[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend_from_slice(&layer.grads);
        }
        out
    }

    fn layers(&self) -> Vec<&Layer> {
        let mut out: Vec<&Layer> = self.base.iter().collect();
        for branch in &self.branches {
            out.extend(branch.stack.iter());
            out.push(&branch.head);
        }
        out
    }

    /// Parameter count of the base and of each branch; the last branch
    /// entry covers the fine-branch-exclusive parameters.
    pub fn param_layout(&self) -> (usize, Vec<usize>) {
        let base: usize = self.base.iter().map(|l| l.params.len()).sum();
        let branches = self
            .branches
            .iter()
            .map(|b| {
                b.stack.iter().map(|l| l.params.len()).sum::<usize>() + b.head.params.len()
            })
            .collect();
        (base, branches)
    }
}

/// The probabilistic average: f_i proportional to c_coarse[t(i)] * f_fine[i],
/// renormalized to sum to one.
pub fn prob_average(c_coarse: &[f64], f_fine: &[f64], t_map: &[usize]) -> Result<Vec<f64>> {
    if f_fine.len() != t_map.len() {
        return Err(Error::Precondition(format!(
            "fine vector has {} entries, parent map {}",
            f_fine.len(),
            t_map.len()
        )));
    }
    let numerators: Vec<f64> = f_fine
        .iter()
        .enumerate()
        .map(|(i, &f)| c_coarse[t_map[i]] * f)
        .collect();
    let denom: f64 = numerators.iter().sum();
    if denom < DEGENERATE_DENOM {
        return Err(Error::Numeric(
            "degenerate probabilistic average: no joint mass on any consistent pair".into(),
        ));
    }
    Ok(numerators.into_iter().map(|x| x / denom).collect())
}

/// Coarse branch loss: mean over the batch of the weighted softmax
/// cross-entropies of branches 1..K-1, computed in log-sum-exp form.
pub fn coarse_loss(
    outputs: &[BranchOutputs],
    targets: &[MultiLevelLabel],
    loss_weights: &[f64],
) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let k = loss_weights.len();
    let n = outputs.len() as f64;
    let mut loss = 0.0;
    for (out, label) in outputs.iter().zip(targets) {
        for b in 0..k.saturating_sub(1) {
            if loss_weights[b] == 0.0 {
                continue;
            }
            let logits = &out.logits[b];
            let y = label.targets[b];
            if y >= logits.len() {
                return Err(Error::Precondition(format!(
                    "target {y} out of range for branch {b}"
                )));
            }
            loss += loss_weights[b] * (log_sum_exp(logits) - logits[y]);
        }
    }
    Ok(loss / n)
}

/// Fine branch loss over the averaged predictions.
pub fn fine_loss(
    averaged: &[Vec<f64>],
    fine_targets: &[usize],
    w_fine: f64,
    mode: FineLossMode,
) -> Result<f64> {
    if averaged.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    if w_fine == 0.0 {
        return Ok(0.0);
    }
    let n = averaged.len() as f64;
    let mut loss = 0.0;
    for (f, &y) in averaged.iter().zip(fine_targets) {
        if y >= f.len() {
            return Err(Error::Precondition(format!("fine target {y} out of range")));
        }
        loss += match mode {
            FineLossMode::Literal => w_fine * (log_sum_exp(f) - f[y]),
            FineLossMode::LogF => -w_fine * f[y].max(f64::MIN_POSITIVE).ln(),
        };
    }
    Ok(loss / n)
}

fn fine_loss_from_outputs(
    outputs: &[BranchOutputs],
    targets: &[MultiLevelLabel],
    w_fine: f64,
    mode: FineLossMode,
) -> Result<f64> {
    let averaged: Vec<Vec<f64>> = outputs.iter().map(|o| o.averaged.clone()).collect();
    let fine_targets: Vec<usize> = targets
        .iter()
        .map(|l| *l.targets.last().unwrap())
        .collect();
    fine_loss(&averaged, &fine_targets, w_fine, mode)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Per-sample loss and the gradient of that loss with respect to every
/// branch's logits, including the cross-branch path from the deepest
/// coarse branch through the probabilistic average into the fine loss.
fn per_sample_loss_and_logit_grads(
    outputs: &BranchOutputs,
    label: &MultiLevelLabel,
    loss_weights: &[f64],
    mode: FineLossMode,
    t_map: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let k = outputs.logits.len();
    let mut dlogits: Vec<Vec<f64>> = outputs.logits.iter().map(|l| vec![0.0; l.len()]).collect();
    let mut loss = 0.0;

    // Coarse terms: d/dlogits of -W log softmax = W (softmax - onehot).
    for b in 0..k.saturating_sub(1) {
        let w = loss_weights[b];
        if w == 0.0 {
            continue;
        }
        let logits = &outputs.logits[b];
        let y = label.targets[b];
        loss += w * (log_sum_exp(logits) - logits[y]);
        let p = softmax(logits)?;
        for (i, g) in dlogits[b].iter_mut().enumerate() {
            *g += w * (p[i] - if i == y { 1.0 } else { 0.0 });
        }
    }

    // Fine term.
    let w_fine = loss_weights[k - 1];
    let y = *label.targets.last().unwrap();
    if w_fine != 0.0 {
        let f = &outputs.averaged;
        // dL/df.
        let mut df = vec![0.0; f.len()];
        match mode {
            FineLossMode::Literal => {
                loss += w_fine * (log_sum_exp(f) - f[y]);
                let s = softmax(f)?;
                for (i, g) in df.iter_mut().enumerate() {
                    *g = w_fine * (s[i] - if i == y { 1.0 } else { 0.0 });
                }
            }
            FineLossMode::LogF => {
                let fy = f[y].max(f64::MIN_POSITIVE);
                loss += -w_fine * fy.ln();
                df[y] = -w_fine / fy;
            }
        }

        if k == 1 {
            // f = softmax(fine logits) directly.
            backprop_softmax(&outputs.fine_softmax, &df, &mut dlogits[0]);
        } else {
            let cp = outputs.coarse_probs.as_ref().unwrap();
            let fk = &outputs.fine_softmax;
            // f = a / S with a_i = cp[t(i)] * fk_i.
            let a: Vec<f64> = fk.iter().enumerate().map(|(i, &v)| cp[t_map[i]] * v).collect();
            let s: f64 = a.iter().sum();
            let dot: f64 = df.iter().zip(&a).map(|(g, ai)| g * ai).sum();
            let da: Vec<f64> = df.iter().zip(&a).map(|(g, _)| g / s - dot / (s * s)).collect();
            // Into the fine softmax and the coarse probabilities.
            let dfk: Vec<f64> = da.iter().enumerate().map(|(i, &d)| d * cp[t_map[i]]).collect();
            let mut dcp = vec![0.0; cp.len()];
            for (i, &d) in da.iter().enumerate() {
                dcp[t_map[i]] += d * fk[i];
            }
            backprop_softmax(fk, &dfk, &mut dlogits[k - 1]);
            backprop_softmax(cp, &dcp, &mut dlogits[k - 2]);
        }
    }
    Ok((loss, dlogits))
}

/// Accumulate d(loss)/d(logits) given p = softmax(logits) and dp.
fn backprop_softmax(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pi), &di) in out.iter_mut().zip(p).zip(dp) {
        *o += pi * (di - dot);
    }
}
