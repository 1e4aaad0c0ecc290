//! Quick timing harness for one full-size training step.

use dehaze_core::haze::{compose_haze, transmission_from_depth, DepthMap, Frame};
use dehaze_core::metrics::psnr;
use dehaze_core::model::{frame_to_tensor, run_video, tensor_to_frame, NetworkConfig, Parameters};
use dehaze_core::train::{clip_window, train_step, AdamW};
use std::time::Instant;

fn main() {
    let (h, w, frames) = (32usize, 32usize, 8usize);
    let depth = DepthMap::new(
        h,
        w,
        (0..h * w)
            .map(|p| 20.0 + 40.0 * (p / w) as f64 / 31.0)
            .collect(),
    )
    .unwrap();
    let t = transmission_from_depth(&depth, 0.03).unwrap();
    let mut clear = Vec::new();
    let mut hazy = Vec::new();
    for f in 0..frames {
        let mut rgb = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.35
                            * ((x as f64 + 2.0 * f as f64) * std::f64::consts::TAU / 32.0
                                + ch as f64 * 2.1)
                                .sin()
                            * (y as f64 * std::f64::consts::TAU / 32.0).cos();
                    rgb[ch * h * w + y * w + x] = v;
                }
            }
        }
        let fr = Frame::new(h, w, rgb).unwrap();
        hazy.push(frame_to_tensor(&compose_haze(&fr, &t, 0.9).unwrap()));
        clear.push(frame_to_tensor(&fr));
    }
    let cfg = NetworkConfig {
        schedule_steps: 300,
        ..NetworkConfig::default()
    };
    let mut params = Parameters::init(&cfg).unwrap();
    let mut opt = AdamW::new(&params);
    let t0 = Instant::now();
    for i in 0..300 {
        let (lo, hi) = clip_window(opt.step, hazy.len(), cfg.clip_len);
        let (rep, _) =
            train_step(&mut params, &mut opt, &cfg, &hazy[lo..hi], &clear[lo..hi]).unwrap();
        if i % 25 == 0 || i == 299 {
            println!(
                "step {i}: {:.1}s out={:.4} phy={:.4} flow={:.4} total={:.4}",
                t0.elapsed().as_secs_f64(),
                rep.out,
                rep.phy,
                rep.flow,
                rep.total
            );
        }
    }
    let outputs = run_video(&params, &cfg, &hazy).unwrap();
    let mut base = 0.0;
    let mut trained = 0.0;
    for (i, o) in outputs.iter().enumerate() {
        let gt = tensor_to_frame(&clear[i]).unwrap();
        let hz = tensor_to_frame(&hazy[i]).unwrap();
        let dh = tensor_to_frame(&o.output).unwrap();
        base += psnr(&hz, &gt, 1.0).unwrap() / frames as f64;
        trained += psnr(&dh, &gt, 1.0).unwrap() / frames as f64;
    }
    println!("PSNR hazy={base:.2} dehazed={trained:.2} gain={:.2}", trained - base);
}
