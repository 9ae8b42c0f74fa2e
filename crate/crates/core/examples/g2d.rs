use dynsplat::dataio::*;
use dynsplat::deform::{deform_scene, TimeStamp};
use dynsplat::raster::{rasterize_forward, PayloadSpec};
use dynsplat::style::compute_stats;
use dynsplat::train::TrainConfig;
use std::path::Path;

fn main() {
    let ds = load_dataset(Path::new("/tmp/probe/data")).unwrap();
    let ckpt = load_checkpoint(Path::new("/tmp/probe/run2/checkpoint.ckpt")).unwrap();
    let cfg: TrainConfig = toml::from_str(&ckpt.meta.config_toml).unwrap();
    let rs = &ckpt.running_stats;
    for cam in [0usize, 2, 3] {
        let times: Vec<f64> = ds.frames.iter().filter(|f| f.camera == cam).map(|f| f.time).collect();
        let mut ratios = Vec::new();
        let mut adjacent_jitter = Vec::new();
        let mut prev: Option<Vec<f64>> = None;
        for &t in &times {
            let deformed = deform_scene(&ckpt.scene, &ckpt.field, &ckpt.head, TimeStamp::new(t).unwrap(), &cfg.deform_config()).unwrap();
            let out = rasterize_forward(&deformed, &ds.cameras[cam], ckpt.scene.background, 0, PayloadSpec::Features).unwrap();
            let pooled = out.feature_map.avg_pool(4).unwrap();
            let st = compute_stats(&pooled, None).unwrap();
            let sr: f64 = st.std.iter().zip(&rs.std_avg).map(|(a,b)| a/b).sum::<f64>() / 32.0;
            ratios.push(sr);
            if let Some(p) = &prev {
                let jit: f64 = st.std.iter().zip(p).map(|(a,b)| (a/b - 1.0).abs()).sum::<f64>() / 32.0;
                adjacent_jitter.push(jit);
            }
            prev = Some(st.std.clone());
        }
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        let jit = adjacent_jitter.iter().sum::<f64>() / adjacent_jitter.len() as f64;
        println!("cam {}: avg σ_t/σ_ma {:.4}, adjacent-frame σ jitter {:.4}%", cam, avg, jit*100.0);
    }
}
