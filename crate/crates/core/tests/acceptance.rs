//! Acceptance suite: one test per release criterion, each printing a single
//! PASS line with the measured numbers (run with `--nocapture` to see them).

use dehaze_core::autodiff::{grad_check_multi, Tensor};
use dehaze_core::haze::{
    compose_haze, recover_scene, synthesize_video, transmission_from_depth, DepthMap, Frame,
    SynthesisConfig,
};
use dehaze_core::io;
use dehaze_core::losses::{flow_loss, physical_loss, total_loss, ScalePrediction, ScaleTarget};
use dehaze_core::metrics::{evaluate_video, psnr, ssim};
use dehaze_core::model::{frame_to_tensor, run_video, tensor_to_frame, NetworkConfig, Parameters};
use dehaze_core::multirange::{
    build_range_sets, gmra, initial_flow, refine_flow, stda, windowed_cross_attention, StdaParams,
};
use dehaze_core::prior::{attention_weights, compress_prior, guide_scene, memory_read, TokenMemory};
use dehaze_core::rng::Xorshift64;
use dehaze_core::train::{clip_window, load_checkpoint, save_checkpoint, train_step, AdamW};
use std::time::Instant;

fn rand(shape: &[usize], rng: &mut Xorshift64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
}

fn rand_in(shape: &[usize], lo: f64, hi: f64, rng: &mut Xorshift64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect())
}

// --- 1. gradient suite -------------------------------------------------

#[test]
fn gradient_suite_covers_every_differentiable_operation() {
    let start = Instant::now();
    let mut rng = Xorshift64::new(100);
    let mut worst: (f64, &str) = (0.0, "none");
    let mut record = |name: &'static str, err: f64| {
        assert!(err <= 1e-5, "{name}: rel err {err}");
        if err > worst.0 {
            worst = (err, name);
        }
    };

    let a = rand(&[4, 5], &mut rng);
    let b = rand(&[5, 3], &mut rng);
    record(
        "matmul",
        grad_check_multi(
            |i| i[0].matmul(&i[1]).unwrap().mul(&i[0].matmul(&i[1]).unwrap()).unwrap().sum_all(),
            &[a, b],
            1e-6,
        ),
    );

    let x = rand(&[3, 4, 4], &mut rng);
    record(
        "softmax_axis0",
        grad_check_multi(
            |i| {
                let s = i[0].softmax(0).unwrap();
                s.mul(&i[0]).unwrap().sum_all()
            },
            &[x],
            1e-6,
        ),
    );
    let x = rand(&[6, 5], &mut rng);
    record(
        "softmax_axis1",
        grad_check_multi(
            |i| {
                let s = i[0].softmax(1).unwrap();
                s.mul(&i[0]).unwrap().sum_all()
            },
            &[x],
            1e-6,
        ),
    );

    let x = rand(&[2, 6, 6], &mut rng);
    let w = rand(&[3, 2, 3, 3], &mut rng);
    let bb = rand(&[3], &mut rng);
    record(
        "conv2d",
        grad_check_multi(
            |i| {
                let y = i[0].conv2d(&i[1], &i[2], 1, 1).unwrap();
                y.mul(&y).unwrap().sum_all()
            },
            &[x, w, bb],
            1e-6,
        ),
    );

    let x = rand(&[8, 4, 4], &mut rng);
    record(
        "pixel_shuffle",
        grad_check_multi(
            |i| {
                let y = i[0].pixel_shuffle(2).unwrap();
                y.mul(&y).unwrap().sum_all()
            },
            &[x],
            1e-6,
        ),
    );

    let stack = rand(&[2, 2, 6, 6], &mut rng);
    let flow = rand_in(&[3, 6, 6], -0.8, 0.8, &mut rng);
    record(
        "space_time_sample",
        grad_check_multi(
            |i| {
                let y = i[0].space_time_sample(&i[1]).unwrap();
                y.mul(&y).unwrap().sum_all()
            },
            &[stack, flow],
            1e-6,
        ),
    );

    let c = 2;
    let j = rand(&[c, 4, 4], &mut rng).scale(0.3);
    let al = rand(&[c, 4, 4], &mut rng).scale(0.3);
    let fl = rand_in(&[3, 4, 4], -0.6, 0.6, &mut rng);
    let ow1 = rand(&[c, 2 * c + 3, 3, 3], &mut rng).scale(0.3);
    let ob1 = rand(&[c], &mut rng).scale(0.1);
    let ow2 = rand(&[3, c, 3, 3], &mut rng).scale(0.1);
    let ob2 = rand(&[3], &mut rng).scale(0.05);
    record(
        "refine_flow",
        grad_check_multi(
            |i| {
                let f = refine_flow(&i[0], &i[1], &i[2], &[(&i[3], &i[4]), (&i[5], &i[6])]).unwrap();
                f.mul(&f).unwrap().sum_all()
            },
            &[j, al, fl, ow1, ob1, ow2, ob2],
            1e-6,
        ),
    );

    // stda + gmra end to end at C=8 on 8x8 frames with two ranges
    let c = 8;
    let target = rand(&[c, 8, 8], &mut rng).scale(0.5);
    let h1 = rand(&[c, 8, 8], &mut rng).scale(0.5);
    let h2 = rand(&[c, 8, 8], &mut rng).scale(0.5);
    let p_t = rand(&[c, 8, 8], &mut rng).scale(0.5);
    let ow1 = rand(&[c, 2 * c + 3, 3, 3], &mut rng).scale(0.2);
    let ob1 = rand(&[c], &mut rng).scale(0.05);
    let ow2 = rand(&[3, c, 3, 3], &mut rng).scale(0.05);
    let ob2 = rand(&[3], &mut rng).scale(0.02);
    let u_q = rand(&[c, c], &mut rng).scale(0.3);
    let u_kv = rand(&[c, 2 * c], &mut rng).scale(0.3);
    let fw1 = rand(&[c, 2 * c], &mut rng).scale(0.3);
    let fb1 = rand(&[2 * c], &mut rng).scale(0.05);
    let fw2 = rand(&[2 * c, c], &mut rng).scale(0.3);
    let fb2 = rand(&[c], &mut rng).scale(0.05);
    record(
        "stda_gmra",
        grad_check_multi(
            |i| {
                let params = StdaParams {
                    offset_net: vec![(&i[4], &i[5]), (&i[6], &i[7])],
                    u_q: &i[8],
                    u_kv: &i[9],
                    ffn_w1: &i[10],
                    ffn_b1: &i[11],
                    ffn_w2: &i[12],
                    ffn_b2: &i[13],
                    window: 4,
                    heads: 2,
                };
                let sets = build_range_sets(&[i[1].clone(), i[2].clone()], &i[0], 2).unwrap();
                let flow = initial_flow(8, 8);
                let mut feats = Vec::new();
                let mut priors = Vec::new();
                for set in &sets {
                    let (jr, fo) = stda(&i[0], set, &flow, &params).unwrap();
                    priors.push(set.stack.space_time_sample(&fo).unwrap());
                    feats.push(jr);
                }
                let (out, _) = gmra(&feats, &priors, &i[0], &i[3]).unwrap();
                out.mul(&out).unwrap().sum_all()
            },
            &[
                target, h1, h2, p_t, ow1, ob1, ow2, ob2, u_q, u_kv, fw1, fb1, fw2, fb2,
            ],
            1e-6,
        ),
    );

    // memory read with tracked query and tokens
    let q = rand(&[4, 3, 3], &mut rng);
    let t1 = rand(&[2, 4], &mut rng);
    let t2 = rand(&[2, 4], &mut rng);
    record(
        "memory_read",
        grad_check_multi(
            |i| {
                let mut mem = TokenMemory::new(4);
                mem.push(i[1].clone());
                mem.push(i[2].clone());
                let y = memory_read(&i[0], &mem).unwrap();
                y.mul(&y).unwrap().sum_all()
            },
            &[q, t1, t2],
            1e-6,
        ),
    );

    // prior compression + guidance
    let p = rand(&[3, 4, 4], &mut rng);
    let jf = rand(&[3, 4, 4], &mut rng);
    let hw = rand(&[5, 3, 3, 3], &mut rng);
    let hb = rand(&[5], &mut rng);
    let g1 = rand(&[3, 6, 3, 3], &mut rng);
    let gb1 = rand(&[3], &mut rng);
    let g2 = rand(&[3, 3, 3, 3], &mut rng);
    let gb2 = rand(&[3], &mut rng);
    record(
        "compress_prior_guide_scene",
        grad_check_multi(
            |i| {
                let (dist, token) = compress_prior(&i[0], &i[2], &i[3], 5).unwrap();
                let guided =
                    guide_scene(&i[0], &i[1], &[(&i[4], &i[5]), (&i[6], &i[7])]).unwrap();
                let s1 = dist.mul(&dist).unwrap().sum_all();
                let s2 = token.mul(&token).unwrap().sum_all();
                let s3 = guided.mul(&guided).unwrap().sum_all();
                s1.add(&s2).unwrap().add(&s3).unwrap()
            },
            &[p, jf, hw, hb, g1, gb1, g2, gb2],
            1e-6,
        ),
    );

    // losses: output + physical + flow, combined
    let jh = rand_in(&[3, 4, 4], 0.1, 0.9, &mut rng);
    let jg = rand_in(&[3, 4, 4], 0.1, 0.9, &mut rng);
    let ih = rand_in(&[3, 4, 4], 0.1, 0.9, &mut rng);
    let ig = rand_in(&[3, 4, 4], 0.1, 0.9, &mut rng);
    let stack = rand(&[2, 3, 4, 4], &mut rng);
    let lflow = rand_in(&[3, 4, 4], -0.7, 0.7, &mut rng);
    record(
        "losses",
        grad_check_multi(
            |i| {
                let out = dehaze_core::losses::output_loss(&i[0], &i[1]).unwrap();
                let phy = physical_loss(
                    &[ScalePrediction {
                        i_hat: &i[2],
                        j_hat: &i[0],
                    }],
                    &[ScaleTarget { i: &i[3], j: &i[1] }],
                )
                .unwrap();
                let fl = flow_loss(
                    &[vec![i[4].clone()]],
                    &[vec![i[5].clone()]],
                    std::slice::from_ref(&i[1]),
                )
                .unwrap();
                total_loss(&out, &phy, &fl, 0.2, 0.04).unwrap().0
            },
            &[jh, jg, ih, ig, stack, lflow],
            1e-6,
        ),
    );

    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs_f64() <= 120.0,
        "gradient suite took {elapsed:?}, budget is 2 minutes"
    );
    println!(
        "PASS: gradient suite, worst rel err {:.3e} ({}), {:.1}s",
        worst.0,
        worst.1,
        elapsed.as_secs_f64()
    );
}

// --- 2. physical-model exactness ---------------------------------------

#[test]
fn physical_model_round_trips_and_reconstruction_identity() {
    // haze composition / recovery round trip
    let mut rng = Xorshift64::new(200);
    let (h, w) = (6, 6);
    let clear = Frame::new(h, w, (0..3 * h * w).map(|_| rng.next_f64()).collect()).unwrap();
    let depth = DepthMap::new(h, w, (0..h * w).map(|_| rng.uniform(1.0, 60.0)).collect()).unwrap();
    let t = transmission_from_depth(&depth, 0.01).unwrap(); // t >= e^-0.6 > floor
    let a = 0.9;
    let hazy = compose_haze(&clear, &t, a).unwrap();
    let back = recover_scene(&hazy, &t, a, 0.05).unwrap();
    let mut max_rt = 0.0f64;
    for (x, y) in clear.rgb.iter().zip(&back.rgb) {
        max_rt = max_rt.max((x - y).abs());
    }
    assert!(max_rt <= 1e-12, "round trip err {max_rt}");

    // per-scale reconstruction identity, in process and after file round trip
    let cfg = NetworkConfig {
        scales: 2,
        channels: vec![4, 8],
        ranges: 2,
        d_bins: 4,
        memory: 2,
        ..NetworkConfig::default()
    };
    let params = Parameters::init(&cfg).unwrap();
    let frame = Tensor::from_vec(&[3, 8, 8], (0..192).map(|_| rng.next_f64()).collect());
    let outs = run_video(&params, &cfg, &[frame]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut max_mem = 0.0f64;
    let mut max_file = 0.0f64;
    for (s, sc) in outs[0].scales.iter().enumerate() {
        let n = sc.t_hat.len();
        let a = sc.a_hat.data()[0];
        for ch in 0..3 {
            for p in 0..n {
                let tt = sc.t_hat.data()[p];
                let want = sc.j_hat.data()[ch * n + p] * tt + a * (1.0 - tt);
                max_mem = max_mem.max((sc.i_hat.data()[ch * n + p] - want).abs());
            }
        }
        for (name, t) in [
            ("t_hat", &sc.t_hat),
            ("a_hat", &sc.a_hat),
            ("j_hat", &sc.j_hat),
            ("i_hat", &sc.i_hat),
        ] {
            io::write_dfm(&dir.path().join(format!("s{s}.{name}.dfm")), t.shape(), t.data())
                .unwrap();
        }
        let (_, tt) = io::read_dfm(&dir.path().join(format!("s{s}.t_hat.dfm"))).unwrap();
        let (_, aa) = io::read_dfm(&dir.path().join(format!("s{s}.a_hat.dfm"))).unwrap();
        let (_, jj) = io::read_dfm(&dir.path().join(format!("s{s}.j_hat.dfm"))).unwrap();
        let (_, ii) = io::read_dfm(&dir.path().join(format!("s{s}.i_hat.dfm"))).unwrap();
        for ch in 0..3 {
            for p in 0..n {
                let want = jj[ch * n + p] * tt[p] + aa[0] * (1.0 - tt[p]);
                max_file = max_file.max((ii[ch * n + p] - want).abs());
            }
        }
    }
    assert!(max_mem <= 1e-12, "in-process identity err {max_mem}");
    assert!(max_file <= 1e-9, "file round-trip identity err {max_file}");
    println!(
        "PASS: physical exactness (round trip {max_rt:.2e}, identity {max_mem:.2e}, file {max_file:.2e})"
    );
}

// --- 3. sampling oracle -------------------------------------------------

/// Independent brute-force trilinear sampler matching the corner-aligned,
/// clamped convention.
fn trilinear_brute_force(stack: &Tensor, flow: &Tensor) -> Vec<f64> {
    let (r, c, h, w) = (
        stack.shape()[0],
        stack.shape()[1],
        stack.shape()[2],
        stack.shape()[3],
    );
    let hw = h * w;
    let place = |coord: f64, extent: usize| -> (usize, usize, f64) {
        if extent == 1 {
            return (0, 0, 0.0);
        }
        let idx = (coord.clamp(-1.0, 1.0) + 1.0) * 0.5 * (extent as f64 - 1.0);
        let lo = (idx.floor() as usize).min(extent - 1);
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, idx - lo as f64)
    };
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let (t0, t1, ft) = place(flow.data()[p], r);
        let (y0, y1, fy) = place(flow.data()[hw + p], h);
        let (x0, x1, fx) = place(flow.data()[2 * hw + p], w);
        for ch in 0..c {
            let mut acc = 0.0;
            for (ti, twt) in [(t0, 1.0 - ft), (t1, ft)] {
                for (yi, ywt) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xi, xwt) in [(x0, 1.0 - fx), (x1, fx)] {
                        acc += stack.data()[((ti * c + ch) * h + yi) * w + xi] * twt * ywt * xwt;
                    }
                }
            }
            out[ch * hw + p] = acc;
        }
    }
    out
}

#[test]
fn sampling_matches_brute_force_oracle_on_200_instances() {
    let mut rng = Xorshift64::new(300);
    let mut max_err = 0.0f64;
    for _ in 0..200 {
        let r = 1 + rng.index(3);
        let c = 1 + rng.index(3);
        let h = 2 + rng.index(7);
        let w = 2 + rng.index(7);
        let stack = rand(&[r, c, h, w], &mut rng);
        // include out-of-range coordinates to exercise clamping
        let flow = rand_in(&[3, h, w], -1.3, 1.3, &mut rng);
        let got = stack.space_time_sample(&flow).unwrap();
        let want = trilinear_brute_force(&stack, &flow);
        for (a, b) in got.data().iter().zip(&want) {
            max_err = max_err.max((a - b).abs());
        }
    }
    assert!(max_err <= 1e-9, "sampling oracle err {max_err}");
    println!("PASS: sampling oracle over 200 instances, max abs err {max_err:.3e}");
}

// --- 4. attention normalization ----------------------------------------

#[test]
fn attention_and_aggregation_weights_are_normalized() {
    let mut rng = Xorshift64::new(400);
    // memory-read weights
    let c = 4;
    let q = rand(&[12, c], &mut rng);
    let k = rand(&[8, c], &mut rng);
    let weights = attention_weights(&q, &k, c as f64).unwrap();
    let mut max_dev = 0.0f64;
    for row in 0..12 {
        let s: f64 = weights.data()[row * 8..(row + 1) * 8].iter().sum();
        max_dev = max_dev.max((s - 1.0).abs());
    }
    assert!(max_dev <= 1e-12, "memory attention rows deviate by {max_dev}");

    // range aggregation weights
    let feats: Vec<Tensor> = (0..3).map(|_| rand(&[c, 5, 5], &mut rng)).collect();
    let priors: Vec<Tensor> = (0..3).map(|_| rand(&[c, 5, 5], &mut rng)).collect();
    let jt = rand(&[c, 5, 5], &mut rng);
    let pt = rand(&[c, 5, 5], &mut rng);
    let (_, w) = gmra(&feats, &priors, &jt, &pt).unwrap();
    let mut max_dev_g = 0.0f64;
    for p in 0..25 {
        let s: f64 = (0..3).map(|r| w.data()[r * 25 + p]).sum();
        max_dev_g = max_dev_g.max((s - 1.0).abs());
    }
    assert!(max_dev_g <= 1e-12, "gmra weights deviate by {max_dev_g}");

    // single-range aggregation is exactly the identity
    let (out, w1) = gmra(
        &[feats[0].clone()],
        &[priors[0].clone()],
        &jt,
        &pt,
    )
    .unwrap();
    assert_eq!(out.data(), feats[0].data());
    assert!(w1.data().iter().all(|v| *v == 1.0));
    println!(
        "PASS: attention normalization (memory {max_dev:.2e}, ranges {max_dev_g:.2e}, R=1 exact)"
    );
}

// --- 5. windowed attention oracle ---------------------------------------

#[test]
fn single_window_attention_matches_dense_cross_attention() {
    let mut rng = Xorshift64::new(500);
    let c = 4;
    let heads = 2;
    let dh = c / heads;
    let q_feat = rand(&[c, 4, 4], &mut rng);
    let kv_feat = rand(&[c, 4, 4], &mut rng);
    let u_q = rand(&[c, c], &mut rng);
    let u_kv = rand(&[c, 2 * c], &mut rng);
    let got = windowed_cross_attention(&q_feat, &kv_feat, &u_q, &u_kv, 4, heads).unwrap();

    // dense oracle over all 16 pixels
    let n = 16;
    let tok = |t: &Tensor, i: usize, ch: usize| t.data()[ch * n + i];
    let mut want = vec![0.0; c * n];
    for hh in 0..heads {
        for i in 0..n {
            let mut qi = vec![0.0; dh];
            for d in 0..dh {
                for ic in 0..c {
                    qi[d] += tok(&q_feat, i, ic) * u_q.data()[ic * c + hh * dh + d];
                }
            }
            let mut scores = vec![0.0; n];
            for jx in 0..n {
                let mut kj = vec![0.0; dh];
                for d in 0..dh {
                    for ic in 0..c {
                        kj[d] += tok(&kv_feat, jx, ic) * u_kv.data()[ic * 2 * c + hh * dh + d];
                    }
                }
                scores[jx] =
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..dh {
                let mut acc = 0.0;
                for jx in 0..n {
                    let mut vj = 0.0;
                    for ic in 0..c {
                        vj += tok(&kv_feat, jx, ic) * u_kv.data()[ic * 2 * c + c + hh * dh + d];
                    }
                    acc += exps[jx] / z * vj;
                }
                want[(hh * dh + d) * n + i] = acc;
            }
        }
    }
    let mut max_err = 0.0f64;
    for (a, b) in got.data().iter().zip(&want) {
        max_err = max_err.max((a - b).abs());
    }
    assert!(max_err <= 1e-10, "windowed attention err {max_err}");
    println!("PASS: windowed attention matches dense oracle, max abs err {max_err:.3e}");
}

// --- 6. synthesis fidelity ----------------------------------------------

#[test]
fn synthesized_haze_matches_its_emitted_maps_and_manifest() {
    let betas = [0.005, 0.01, 0.02, 0.03];
    let mut rng = Xorshift64::new(600);
    let (h, w) = (8, 8);
    let mut max_float = 0.0f64;
    let mut max_file = 0.0f64;
    for seed in 0..50u64 {
        let clear: Vec<Frame> = (0..2)
            .map(|_| Frame::new(h, w, (0..3 * h * w).map(|_| rng.next_f64()).collect()).unwrap())
            .collect();
        let depths: Vec<DepthMap> = (0..2)
            .map(|_| {
                DepthMap::new(h, w, (0..h * w).map(|_| rng.uniform(1.0, 80.0)).collect()).unwrap()
            })
            .collect();
        let cfg = SynthesisConfig {
            rng_seed: seed,
            ..SynthesisConfig::default()
        };
        let (hazy, trans, params) = synthesize_video(&clear, &depths, &cfg).unwrap();
        assert!(
            betas.iter().any(|b| (b - params.beta).abs() < 1e-15),
            "beta {} not in the allowed palette",
            params.beta
        );
        assert!((0.75..=1.0).contains(&params.a), "A = {}", params.a);

        // float pipeline: exact against the emitted transmission and A
        for f in 0..2 {
            let n = h * w;
            for ch in 0..3 {
                for p in 0..n {
                    let t = trans[f].t[p];
                    let want =
                        (clear[f].rgb[ch * n + p] * t + params.a * (1.0 - t)).clamp(0.0, 1.0);
                    max_float = max_float.max((hazy[f].rgb[ch * n + p] - want).abs());
                }
            }
        }

        // file pipeline: 8-bit hazy PNG vs 16-bit transmission PNG + manifest
        if seed == 0 {
            let dir = tempfile::tempdir().unwrap();
            io::write_frame_png(&dir.path().join("hazy.png"), &hazy[0]).unwrap();
            io::write_transmission_png(&dir.path().join("t.png"), &trans[0]).unwrap();
            io::write_manifest(
                &dir.path().join("m.txt"),
                &[("beta", format!("{}", params.beta)), ("a", format!("{}", params.a))],
            )
            .unwrap();
            let hz = io::read_frame_png(&dir.path().join("hazy.png")).unwrap();
            let tm = io::read_transmission_png(&dir.path().join("t.png")).unwrap();
            let manifest = io::read_manifest(&dir.path().join("m.txt")).unwrap();
            let a: f64 = manifest[1].1.parse().unwrap();
            let n = h * w;
            for ch in 0..3 {
                for p in 0..n {
                    let want =
                        (clear[0].rgb[ch * n + p] * tm.t[p] + a * (1.0 - tm.t[p])).clamp(0.0, 1.0);
                    max_file = max_file.max((hz.rgb[ch * n + p] - want).abs());
                }
            }
        }
    }
    assert!(max_float <= 1e-12, "float pipeline err {max_float}");
    // one 8-bit quantization step, plus the 16-bit transmission rounding
    assert!(max_file <= 1.0 / 255.0, "file pipeline err {max_file}");
    println!(
        "PASS: synthesis fidelity (float {max_float:.2e}, 8-bit file {max_file:.2e} <= 1/255)"
    );
}

// --- 7. toy overfit ------------------------------------------------------

/// Smooth moving pattern over a static sloped depth field, hazed with
/// strong scattering so the identity mapping starts far from the target.
fn toy_clip() -> (Vec<Frame>, Vec<Frame>) {
    let (h, w, frames) = (32, 32, 8);
    let mut clear = Vec::with_capacity(frames);
    let mut hazy = Vec::with_capacity(frames);
    let depth = DepthMap::new(
        h,
        w,
        (0..h * w)
            .map(|p| 20.0 + 40.0 * (p / w) as f64 / (h - 1) as f64)
            .collect(),
    )
    .unwrap();
    let t = transmission_from_depth(&depth, 0.03).unwrap();
    let a = 0.9;
    for f in 0..frames {
        let mut rgb = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let phase = ch as f64 * 2.1;
                    let v = 0.5
                        + 0.35
                            * ((x as f64 + 2.0 * f as f64) * std::f64::consts::TAU / w as f64
                                + phase)
                                .sin()
                            * (y as f64 * std::f64::consts::TAU / h as f64).cos();
                    rgb[ch * h * w + y * w + x] = v;
                }
            }
        }
        let frame = Frame::new(h, w, rgb).unwrap();
        hazy.push(compose_haze(&frame, &t, a).unwrap());
        clear.push(frame);
    }
    (hazy, clear)
}

#[test]
fn toy_clip_overfits_within_budget() {
    let start = Instant::now();
    let cfg = NetworkConfig {
        schedule_steps: 300,
        ..NetworkConfig::default()
    };
    assert_eq!(cfg.scales, 4);
    assert_eq!(cfg.channels, vec![8, 16, 32, 64]);
    assert_eq!(cfg.ranges, 3);
    assert_eq!(cfg.d_bins, 32);
    assert_eq!(cfg.memory, 4);
    assert!((cfg.lr0 - 2e-4).abs() < 1e-18);
    assert!((cfg.lambda_phy - 0.2).abs() < 1e-18);
    assert!((cfg.lambda_flow - 0.04).abs() < 1e-18);

    let (hazy_frames, clear_frames) = toy_clip();
    let hazy: Vec<Tensor> = hazy_frames.iter().map(frame_to_tensor).collect();
    let clear: Vec<Tensor> = clear_frames.iter().map(frame_to_tensor).collect();

    let mut params = Parameters::init(&cfg).unwrap();
    let mut opt = AdamW::new(&params);
    let mut initial_total = None;
    let mut final_total = 0.0;
    for _ in 0..300 {
        let (lo, hi) = clip_window(opt.step, hazy.len(), cfg.clip_len);
        let (report, _) = train_step(&mut params, &mut opt, &cfg, &hazy[lo..hi], &clear[lo..hi])
            .expect("finite training step");
        if initial_total.is_none() {
            initial_total = Some(report.total);
        }
        final_total = report.total;
    }
    let initial_total = initial_total.unwrap();

    let outputs = run_video(&params, &cfg, &hazy).unwrap();
    let dehazed: Vec<Frame> = outputs
        .iter()
        .map(|o| tensor_to_frame(&o.output).unwrap())
        .collect();
    let base: f64 = hazy_frames
        .iter()
        .zip(&clear_frames)
        .map(|(a, b)| psnr(a, b, 1.0).unwrap())
        .sum::<f64>()
        / 8.0;
    let trained: f64 = dehazed
        .iter()
        .zip(&clear_frames)
        .map(|(a, b)| psnr(a, b, 1.0).unwrap())
        .sum::<f64>()
        / 8.0;
    let elapsed = start.elapsed();

    assert!(
        final_total <= 0.3 * initial_total,
        "loss {final_total} did not reach 30% of initial {initial_total}"
    );
    assert!(
        trained - base >= 3.0,
        "PSNR gain {:.2} dB (hazy {base:.2}, dehazed {trained:.2})",
        trained - base
    );
    assert!(
        elapsed.as_secs_f64() <= 600.0,
        "overfit run took {elapsed:?}, budget is 10 minutes"
    );
    println!(
        "PASS: toy overfit (loss {initial_total:.4} -> {final_total:.4}, PSNR {base:.2} -> {trained:.2} dB, {:.0}s)",
        elapsed.as_secs_f64()
    );
}

// --- 8. determinism -------------------------------------------------------

#[test]
fn reruns_and_resume_are_bit_exact() {
    let cfg = NetworkConfig {
        scales: 2,
        channels: vec![4, 8],
        ranges: 2,
        d_bins: 4,
        memory: 2,
        clip_len: 2,
        schedule_steps: 50,
        ..NetworkConfig::default()
    };
    let mut rng = Xorshift64::new(800);
    let (h, w) = (16, 16);
    let clear: Vec<Frame> = (0..3)
        .map(|_| Frame::new(h, w, (0..3 * h * w).map(|_| rng.next_f64()).collect()).unwrap())
        .collect();
    let depths: Vec<DepthMap> = (0..3)
        .map(|_| DepthMap::new(h, w, (0..h * w).map(|_| rng.uniform(1.0, 60.0)).collect()).unwrap())
        .collect();

    // synthesize twice with the same seed: byte-identical artifacts
    let syn = |dir: &std::path::Path| {
        let scfg = SynthesisConfig {
            rng_seed: 9,
            ..SynthesisConfig::default()
        };
        let (hazy, trans, params) = synthesize_video(&clear, &depths, &scfg).unwrap();
        io::write_frame_png(&dir.join("hazy.png"), &hazy[0]).unwrap();
        io::write_transmission_png(&dir.join("t.png"), &trans[0]).unwrap();
        io::write_manifest(
            &dir.join("m.txt"),
            &[("beta", format!("{}", params.beta)), ("a", format!("{}", params.a))],
        )
        .unwrap();
        hazy
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let hazy = syn(d1.path());
    syn(d2.path());
    for name in ["hazy.png", "t.png", "m.txt"] {
        assert_eq!(
            std::fs::read(d1.path().join(name)).unwrap(),
            std::fs::read(d2.path().join(name)).unwrap(),
            "synthesize artifact {name} differs"
        );
    }

    // train twice: identical checkpoints; eval twice: identical reports
    let hazy_t: Vec<Tensor> = hazy.iter().map(frame_to_tensor).collect();
    let clear_t: Vec<Tensor> = clear.iter().map(frame_to_tensor).collect();
    let train_run = |dir: &std::path::Path| -> Vec<f64> {
        let mut params = Parameters::init(&cfg).unwrap();
        let mut opt = AdamW::new(&params);
        let mut totals = Vec::new();
        for _ in 0..4 {
            let (lo, hi) = clip_window(opt.step, hazy_t.len(), cfg.clip_len);
            let (r, _) =
                train_step(&mut params, &mut opt, &cfg, &hazy_t[lo..hi], &clear_t[lo..hi]).unwrap();
            totals.push(r.total);
        }
        save_checkpoint(&dir.join("ck.bin"), &cfg, &params, &opt).unwrap();
        totals
    };
    let t1 = train_run(d1.path());
    let t2 = train_run(d2.path());
    assert_eq!(t1, t2, "loss trajectories differ");
    let ck1 = std::fs::read(d1.path().join("ck.bin")).unwrap();
    let ck2 = std::fs::read(d2.path().join("ck.bin")).unwrap();
    assert_eq!(ck1, ck2, "checkpoints differ");

    let (cfg1, p1, _) = load_checkpoint(&d1.path().join("ck.bin")).unwrap();
    let eval_run = || {
        let outs = run_video(&p1, &cfg1, &hazy_t).unwrap();
        let pred: Vec<Frame> = outs.iter().map(|o| tensor_to_frame(&o.output).unwrap()).collect();
        let rep = evaluate_video(&pred, &clear).unwrap();
        format!("{:?} {:?}", rep.psnr, rep.ssim)
    };
    assert_eq!(eval_run(), eval_run(), "evaluation differs between reruns");

    // resume reproduces the uninterrupted trajectory exactly
    let mut pa = Parameters::init(&cfg).unwrap();
    let mut oa = AdamW::new(&pa);
    let mut continuous = Vec::new();
    for _ in 0..4 {
        let (lo, hi) = clip_window(oa.step, hazy_t.len(), cfg.clip_len);
        let (r, _) = train_step(&mut pa, &mut oa, &cfg, &hazy_t[lo..hi], &clear_t[lo..hi]).unwrap();
        continuous.push(r.total);
    }
    let mut pb = Parameters::init(&cfg).unwrap();
    let mut ob = AdamW::new(&pb);
    let mut resumed = Vec::new();
    for _ in 0..2 {
        let (lo, hi) = clip_window(ob.step, hazy_t.len(), cfg.clip_len);
        let (r, _) = train_step(&mut pb, &mut ob, &cfg, &hazy_t[lo..hi], &clear_t[lo..hi]).unwrap();
        resumed.push(r.total);
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&dir.path().join("mid.bin"), &cfg, &pb, &ob).unwrap();
    let (cfg_r, mut pc, mut oc) = load_checkpoint(&dir.path().join("mid.bin")).unwrap();
    for _ in 0..2 {
        let (lo, hi) = clip_window(oc.step, hazy_t.len(), cfg_r.clip_len);
        let (r, _) =
            train_step(&mut pc, &mut oc, &cfg_r, &hazy_t[lo..hi], &clear_t[lo..hi]).unwrap();
        resumed.push(r.total);
    }
    assert_eq!(continuous, resumed, "resume diverged from continuous run");
    println!("PASS: determinism (artifacts, checkpoints, eval, resume all bit-exact)");
}

// --- 9. metric oracles -----------------------------------------------------

/// Direct (non-separable) structural-similarity computation over valid
/// 11x11 windows with an explicit 2-D Gaussian weight.
fn ssim_direct(a: &Frame, b: &Frame) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let half = (win / 2) as isize;
    let mut weights = vec![0.0; win * win];
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp();
            weights[(dy + half) as usize * win + (dx + half) as usize] = v;
            sum += v;
        }
    }
    for v in &mut weights {
        *v /= sum;
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let (h, w) = (a.height, a.width);
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa = &a.rgb[ch * n..(ch + 1) * n];
        let pb = &b.rgb[ch * n..(ch + 1) * n];
        let mut acc = 0.0;
        let mut count = 0usize;
        for cy in 0..h - win + 1 {
            for cx in 0..w - win + 1 {
                let (mut ma, mut mb, mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..win {
                    for dx in 0..win {
                        let wgt = weights[dy * win + dx];
                        let va = pa[(cy + dy) * w + cx + dx];
                        let vb = pb[(cy + dy) * w + cx + dx];
                        ma += wgt * va;
                        mb += wgt * vb;
                        maa += wgt * va * va;
                        mbb += wgt * vb * vb;
                        mab += wgt * va * vb;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let cov = mab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / 3.0
}

#[test]
fn metric_values_match_closed_form_and_direct_oracles() {
    // uniform 0.1 offset: MSE = 0.01, PSNR = 10 log10(1/0.01) = 20 dB
    let a = Frame::constant(16, 16, 0.2);
    let b = Frame::constant(16, 16, 0.3);
    let p = psnr(&a, &b, 1.0).unwrap();
    assert!((p - 20.0).abs() <= 1e-9, "psnr = {p}");

    // perfect self-similarity
    let mut rng = Xorshift64::new(900);
    let f = Frame::new(16, 16, (0..768).map(|_| rng.next_f64()).collect()).unwrap();
    assert_eq!(ssim(&f, &f, 1.0).unwrap(), 1.0);

    // fixed structured patterns against the direct-formula oracle
    let mut max_err = 0.0f64;
    for seed in [1u64, 2, 3] {
        let mut rng = Xorshift64::new(seed);
        let (h, w) = (14, 18);
        let mk = |rng: &mut Xorshift64, smooth: f64| {
            let mut rgb = vec![0.0; 3 * h * w];
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let wave =
                            0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.3 + ch as f64).sin());
                        rgb[ch * h * w + y * w + x] =
                            (wave + smooth * rng.uniform(-0.1, 0.1)).clamp(0.0, 1.0);
                    }
                }
            }
            Frame::new(h, w, rgb).unwrap()
        };
        let x = mk(&mut rng, 1.0);
        let y = mk(&mut rng, 1.0);
        let got = ssim(&x, &y, 1.0).unwrap();
        let want = ssim_direct(&x, &y);
        max_err = max_err.max((got - want).abs());
    }
    assert!(max_err <= 1e-9, "ssim oracle err {max_err}");
    println!("PASS: metric oracles (psnr 20 dB exact, ssim self = 1, direct-oracle err {max_err:.2e})");
}

// --- 10. ablation plumbing --------------------------------------------------

#[test]
fn ablation_configurations_build_and_train() {
    let base = NetworkConfig {
        clip_len: 2,
        schedule_steps: 50,
        ..NetworkConfig::default()
    };
    let mut rng = Xorshift64::new(1000);
    let (h, w) = (16, 16);
    let clear: Vec<Tensor> = (0..2)
        .map(|_| Tensor::from_vec(&[3, h, w], (0..3 * h * w).map(|_| rng.next_f64()).collect()))
        .collect();
    let hazy: Vec<Tensor> = clear.iter().map(|f| f.scale(0.6).add_scalar(0.3)).collect();

    let run_one = |cfg: &NetworkConfig| -> usize {
        let mut params = Parameters::init(cfg).unwrap();
        let count = params.num_scalars();
        let mut opt = AdamW::new(&params);
        let (report, _) = train_step(&mut params, &mut opt, cfg, &hazy, &clear).unwrap();
        assert!(report.total.is_finite(), "non-finite loss for {cfg:?}");
        count
    };

    let full = run_one(&base);
    let no_mpg = run_one(&NetworkConfig {
        use_mpg: false,
        ..base.clone()
    });
    let no_msr = run_one(&NetworkConfig {
        use_msr: false,
        ..base.clone()
    });
    assert!(no_mpg < full, "prior guidance off must shrink the network");
    assert!(no_msr < full, "multi-range recovery off must shrink the network");

    let r_counts: Vec<usize> = [1usize, 2, 3, 4]
        .iter()
        .map(|r| {
            run_one(&NetworkConfig {
                ranges: *r,
                ..base.clone()
            })
        })
        .collect();
    assert!(
        r_counts.windows(2).all(|p| p[0] == p[1]),
        "range count must not change the parameter count (shared weights): {r_counts:?}"
    );
    println!(
        "PASS: ablation plumbing (full {full}, -prior {no_mpg}, -ranges {no_msr}, R1..4 {r_counts:?})"
    );
}
