//! Verify the hand-written gradients of a two-branch network against
//! central finite differences.

use cvtnet::cvt::MultiLevelLabel;
use cvtnet::vtnet::{
    gradient_check, FineLossMode, LayerSpec, Tensor, VtNet, VtNetConfig,
};

fn main() -> cvtnet::Result<()> {
    let mut net = VtNet::build(
        VtNetConfig {
            input_shape: vec![1, 4, 4],
            base: vec![
                LayerSpec::Conv2d { out_channels: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2d,
            ],
            taps: vec![2],
            branch_stacks: vec![
                vec![
                    LayerSpec::Flatten,
                    LayerSpec::Affine { out_dim: 6 },
                    LayerSpec::Relu,
                ],
                vec![
                    LayerSpec::Conv2d { out_channels: 2 },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                ],
            ],
            head_sizes: vec![2, 4],
            fine_loss_mode: FineLossMode::Literal,
            seed: 9,
        },
        vec![0, 0, 1, 1],
    )?;

    let batch: Vec<(Tensor, MultiLevelLabel)> = (0..3)
        .map(|i| {
            let data: Vec<f64> = (0..16).map(|j| ((i * 5 + j) as f64 * 0.31).cos()).collect();
            Ok((
                Tensor::from_vec(&[1, 4, 4], data)?,
                MultiLevelLabel {
                    sample_id: format!("g{i}"),
                    targets: vec![i % 2, i % 4],
                },
            ))
        })
        .collect::<cvtnet::Result<_>>()?;

    let report = gradient_check(&mut net, &batch, &[0.7, 1.0], 1e-5)?;
    println!("parameters checked: {}", report.num_params);
    println!("max abs error:      {:.3e}", report.max_abs_err);
    println!("max rel error:      {:.3e}", report.max_rel_err);
    println!("passed:             {}", report.passed());
    Ok(())
}
