//! Train a small branch network in two phases on separable toy data:
//! coarse branches first, then the fine branch.

use cvtnet::cvt::MultiLevelLabel;
use cvtnet::vtnet::{
    evaluate, train, FineLossMode, LayerSpec, LrSchedule, Tensor, TrainPhase, VtNet,
    VtNetConfig,
};

fn main() -> cvtnet::Result<()> {
    let mut net = VtNet::build(
        VtNetConfig {
            input_shape: vec![2],
            base: vec![LayerSpec::Affine { out_dim: 8 }, LayerSpec::Relu],
            taps: vec![1],
            branch_stacks: vec![vec![], vec![]],
            head_sizes: vec![2, 4],
            fine_loss_mode: FineLossMode::Literal,
            seed: 3,
        },
        vec![0, 0, 1, 1],
    )?;

    // Four clusters; the coarse branch separates the sign of x, the fine
    // branch the individual clusters. Unit scale keeps the literal fine
    // loss away from its saturated stationary points.
    let centers = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];
    let mut data = Vec::new();
    for (c, &(x, y)) in centers.iter().enumerate() {
        for d in 0..8 {
            let jitter = d as f64 * 0.025;
            data.push((
                Tensor::from_vec(&[2], vec![x + jitter, y - jitter])?,
                MultiLevelLabel {
                    sample_id: format!("s{c}_{d}"),
                    targets: vec![c / 2, c],
                },
            ));
        }
    }

    let mut phase1 = TrainPhase::coarse(2, 10);
    phase1.lr = LrSchedule::constant(0.02);
    let mut phase2 = TrainPhase::fine(2, 60);
    phase2.lr = LrSchedule::constant(0.1);

    let rows = train(&mut net, &data, &[phase1, phase2], 9)?;
    for row in rows.iter().filter(|r| r.epoch % 20 == 0 || r.epoch == 59) {
        println!(
            "phase {} epoch {:>2} branch {}: loss {:.4} top1 {:.3}",
            row.phase + 1,
            row.epoch,
            row.branch,
            row.loss,
            row.top1
        );
    }

    let acc = evaluate(&mut net, &data)?;
    println!("final accuracy per branch: {acc:?}");
    Ok(())
}
