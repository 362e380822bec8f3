//! Strong error of the scheme against the same noise on a 1/substeps finer grid.

use sinebeta::model::ModelParams;
use sinebeta::sde::{derive_stream, integrate_ensemble_observed, StepPolicy};

fn main() {
    let params = ModelParams::with_grid(2.0, vec![1, 2, 4, 7]).unwrap();
    for &(h0, sub) in &[(1e-3, 100u32), (1e-4, 10), (4e-3, 400), (1.6e-2, 1600)] {
        let mut policy = StepPolicy::until(2.0, 7.0, 4.0).with_h0(h0).with_out_stride(0);
        policy.substeps = sub;
        let mut errs = Vec::new();
        for r in 0..100 {
            let noise = derive_stream(31, r);
            let c = integrate_ensemble_observed(&params, &policy, &noise, 1, &mut ()).unwrap();
            let f = integrate_ensemble_observed(&params, &policy, &noise, sub, &mut ()).unwrap();
            let w = c.terminal().iter().zip(f.terminal()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            errs.push(w);
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rms = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
        println!("h0={h0:e} median={:.4} q95={:.4} rms={rms:.4}", errs[50], errs[95]);
    }
}
