// debug: hybrid-loss fd failures, coordinate level
use tinydet::autodiff::Tensor;
use tinydet::boxgeom::BBox;
use tinydet::cascade::{assemble_batch, freeze_image_state, image_terms_from_state, CascadeConfig};
use tinydet::gradcheck;
use tinydet::netarch::{Detector, ModelConfig};
use tinydet::rng::Rng;

fn main() {
    let full_cfg = ModelConfig {
        strides: vec![4, 8], channels: 8, head_depth: 1, rfe_enabled: true,
        fsm_enabled: true, fsm_channels: 8, anchor_aspect: 1.25,
    };
    let cascade = CascadeConfig {
        stc_levels: vec![0], str_levels: vec![1], fsm_pre_nms_top_k: 8,
        ..CascadeConfig::default()
    };
    for i in 0..20u64 {
        let mut mrng = Rng::new(4000 + i);
        let model = Detector::<f64>::new(&full_cfg, &mut mrng);
        for p in model.parameters() {
            let j: Vec<f64> = p.to_vec().iter().map(|v| v + mrng.normal() * 0.05).collect();
            p.set_data(j);
        }
        let image_data: Vec<f64> = (0..3 * 32 * 32).map(|_| mrng.uniform()).collect();
        let image = Tensor::<f64>::from_vec(&[3, 32, 32], image_data);
        let gts = vec![
            BBox::new(mrng.range(1.0, 8.0), mrng.range(1.0, 8.0), mrng.range(12.0, 20.0), mrng.range(12.0, 22.0)),
            BBox::new(mrng.range(16.0, 20.0), mrng.range(14.0, 18.0), mrng.range(24.0, 31.0), mrng.range(24.0, 31.0)),
        ];
        let anchors = model.anchors_for(32, 32);
        let named = model.named_parameters();
        let params: Vec<&Tensor<f64>> = named.iter().map(|(_, t)| t).collect();
        let state = {
            let pyramid = model.features(&image);
            let preds = model.heads(&pyramid, &cascade.stc_levels, &cascade.str_levels);
            freeze_image_state(&model, &preds, &anchors, &gts, &cascade, true)
        };
        let f = || {
            let pyramid = model.features(&image);
            let preds = model.heads(&pyramid, &cascade.stc_levels, &cascade.str_levels);
            let terms = image_terms_from_state(&model, &pyramid, &preds, &state);
            let (total, _) = assemble_batch(vec![terms]);
            total
        };
        let mut pick = Rng::new(5000 + i);
        let coords: Vec<(usize, usize)> = params.iter().enumerate()
            .map(|(pi, p)| (pi, pick.below(p.numel()))).collect();
        let r = gradcheck::check_coords(&params, &f, 1e-6, &coords);
        if r.max_rel_err > 1e-3 {
            println!("inst {i}: rel {:.2e} abs {:.2e}", r.max_rel_err, r.max_abs_err);
            for &(pi, k) in &coords {
                let r1 = gradcheck::check_coords(&params, &f, 1e-6, &[(pi, k)]);
                if r1.max_rel_err > 1e-3 {
                    for p in &params { p.zero_grad(); }
                    let loss = f();
                    loss.backward();
                    let analytic = params[pi].grad().map(|g| g[k]).unwrap_or(0.0);
                    let f0 = f().item();
                    for h in [1e-5f64, 1e-6, 1e-7] {
                        params[pi].nudge(k, h);
                        let up = f().item();
                        params[pi].nudge(k, -2.0 * h);
                        let dn = f().item();
                        params[pi].nudge(k, h);
                        let fwd = (up - f0) / h;
                        let bwd = (f0 - dn) / h;
                        println!("  {}[{k}]: h={h:.0e} forward {fwd:.8e} backward {bwd:.8e} central {:.8e} analytic {analytic:.8e}",
                            named[pi].0, (up - dn) / (2.0 * h));
                    }
                }
            }
        }
    }
}
