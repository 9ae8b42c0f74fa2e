use dynsplat::dataio::*;
use dynsplat::deform::TimeStamp;
use dynsplat::train::*;
use dynsplat::raster::{rasterize_forward, PayloadSpec};
use std::path::Path;

fn main() {
    let ds = load_dataset(Path::new("/tmp/probe/data")).unwrap();
    let ckpt = load_checkpoint(Path::new("/tmp/probe/run/checkpoint.ckpt")).unwrap();
    let state = state_from_checkpoint(&ckpt).unwrap();
    let cfg: TrainConfig = toml::from_str(&ckpt.meta.config_toml).unwrap();

    // opacity stats
    let mut ops: Vec<f64> = state.scene.gaussians.iter().map(|g| g.opacity()).collect();
    ops.sort_by(f64::total_cmp);
    println!("opacity p0 {:.4} p25 {:.4} p50 {:.4} p75 {:.4} p100 {:.4}", ops[0], ops[ops.len()/4], ops[ops.len()/2], ops[3*ops.len()/4], ops[ops.len()-1]);
    let mut scales: Vec<f64> = state.scene.gaussians.iter().map(|g| g.scales().max()).collect();
    scales.sort_by(f64::total_cmp);
    println!("maxscale p50 {:.4} p90 {:.4} p100 {:.4}", scales[scales.len()/2], scales[9*scales.len()/10], scales[scales.len()-1]);

    // gradient magnitudes on one train frame
    let f = &ds.frames[5];
    let grads = loss_and_grads(
        &state.scene, &state.field, &state.head, &cfg.deform_config(),
        &ds.cameras[f.camera], &f.image, TimeStamp::new(f.time).unwrap(),
        0.2, None, false,
    ).unwrap();
    let mut g2d: Vec<f64> = grads.d_mean2d_norm.clone();
    g2d.sort_by(f64::total_cmp);
    println!("d_mean2d_norm p50 {:.3e} p90 {:.3e} p99 {:.3e} max {:.3e}",
        g2d[g2d.len()/2], g2d[9*g2d.len()/10], g2d[99*g2d.len()/100], g2d[g2d.len()-1]);
    println!("threshold is {:.1e}; above threshold: {}", cfg.densify_grad_threshold,
        g2d.iter().filter(|&&v| v > cfg.densify_grad_threshold).count());

    // render vs gt
    let deformed = dynsplat::deform::deform_scene(&state.scene, &state.field, &state.head, TimeStamp::new(f.time).unwrap(), &cfg.deform_config()).unwrap();
    let out = rasterize_forward(&deformed, &ds.cameras[f.camera], state.scene.background, 0, PayloadSpec::None).unwrap();
    save_png(&out.color, Path::new("/tmp/probe/render.png")).unwrap();
    save_png(&f.image, Path::new("/tmp/probe/gt.png")).unwrap();
    println!("train-view psnr: {:.2}", dynsplat::fmap::psnr(&out.color, &f.image).unwrap());
    // how much alpha coverage
    let cov = out.alpha_map.data().iter().filter(|&&a| a > 0.5).count();
    println!("alpha>0.5 coverage: {}/{}", cov, 64*64);
}
