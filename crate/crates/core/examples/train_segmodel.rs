//! Trains the segmentation network on a single phantom client and prints
//! the loss curve and the final test metrics.
//!
//! ```text
//! cargo run --release --example train_segmodel -- 200 0.3
//! ```

use a3dfdg::federation::sample_crop;
use a3dfdg::metrics::evaluate_model;
use a3dfdg::phantom::{generate_client_dataset, PhantomSpec};
use a3dfdg::rng;
use a3dfdg::segmodel::SegModel;
use ndarray::{Array4, Axis};

fn main() -> a3dfdg::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|a| a.parse().expect("steps")).unwrap_or(100);
    let lr: f32 = args.next().map(|a| a.parse().expect("lr")).unwrap_or(0.3);

    let spec = PhantomSpec { volumes_per_client: 10, ..PhantomSpec::default() };
    let data = generate_client_dataset(&spec, 0)?;
    let mut model = SegModel::init(spec.num_classes(), 0);
    let crop = spec.crop_size;
    let mut r = rng::stream(0, &[42]);
    for step in 1..=steps {
        let mut x = Array4::zeros((2, crop[0], crop[1], crop[2]));
        let mut y = Array4::zeros((2, crop[0], crop[1], crop[2]));
        for s in 0..2 {
            let (sv, labels) = sample_crop(&data.train, crop, &mut r)?;
            x.index_axis_mut(Axis(0), s).assign(&sv.data);
            y.index_axis_mut(Axis(0), s).assign(&labels);
        }
        let (loss, grad) = model.loss_and_grad(x.view(), y.view())?;
        model.sgd_step_in_place(&grad, lr)?;
        if step % 10 == 0 || step == 1 {
            println!("step {step:4}  loss {:.4}  (dice {:.4}, ce {:.4})", loss.total, loss.dice_term, loss.ce_term);
        }
    }
    let table = evaluate_model(&model, &data.test)?;
    println!("test DSC {:.2}%  by organ {:?}", table.global_dsc, table.dsc);
    Ok(())
}
