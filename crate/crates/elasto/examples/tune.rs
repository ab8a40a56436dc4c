use elasto::grid::make_grid;
use elasto::phantom::{build_truth, render_pair, PhantomSpec};
use elasto::picture::{compute_epr, out_of_band_fraction};
use elasto::rng::seeded_rng;
use elasto::signal::psf_kernel;
use elasto::solver::{solve, SolverConfig};
use elasto::strain::compute_strain;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mae(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lambda_v: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let lambda_s: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.4);
    let gamma: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(7);

    let spec = PhantomSpec {
        grid: make_grid(512, 128, 0.04, 0.1).unwrap(),
        scatterer_density: std::env::var("TUNE_DENS").map(|v| v.parse().unwrap()).unwrap_or(12.0),
        bg_poisson: 0.35,
        bg_strain: 0.02,
        inclusions: vec![],
        seed,
    };
    let truth = build_truth(&spec).unwrap();
    let sig_lat: f64 = std::env::var("TUNE_SIGLAT").map(|v| v.parse().unwrap()).unwrap_or(1.5);
    let psf = psf_kernel(0.2, 1.5, sig_lat).unwrap();
    let t0 = std::time::Instant::now();
    let (pre, post) = render_pair(&spec, &truth, &psf, &mut seeded_rng(spec.seed)).unwrap();
    println!("render: {:.2}s", t0.elapsed().as_secs_f64());

    let mut cfg = SolverConfig::default();
    cfg.lambda_v = lambda_v;
    cfg.lambda_s = lambda_s;
    cfg.smooth.gamma = gamma;
    cfg.seed = seed;
    if let Ok(v) = std::env::var("TUNE_ITERS") { cfg.iters_per_level = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("TUNE_TOL") { cfg.tol = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("TUNE_STEP") { cfg.step_size = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("TUNE_LVS") { cfg.lambda_vs = v.parse().unwrap(); }
    if let Ok(v) = std::env::var("TUNE_BETA") { cfg.smooth.beta = v.parse().unwrap(); }
    let t0 = std::time::Instant::now();
    let (disp, report) = solve(&pre, &post, &cfg, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();

    let est = compute_strain(&disp);
    let epr = compute_epr(&est, None);
    let mean_e11 = mean(&est.e11);
    let mean_epr = mean(&epr.v_e);
    println!(
        "solve {dt:.2}s  iters {:?}  total {:.5e}",
        report.iters_per_level, report.final_total
    );
    println!(
        "mean e11 {mean_e11:.5} (truth -0.02, rel err {:.3}%)  mean epr {mean_epr:.4}",
        100.0 * (mean_e11 + 0.02).abs() / 0.02
    );
    println!(
        "axial MAE {:.4e}  lateral MAE {:.4e}  epr-out-frac {:.3}",
        mae(&est.e11, &truth.strain.e11),
        mae(&est.e22, &truth.strain.e22),
        out_of_band_fraction(&epr.v_e)
    );
    println!(
        "disp MAE ax {:.3} samples, lat {:.3} lines",
        mae(disp.axial(), truth.disp.axial()),
        mae(disp.lateral(), truth.disp.lateral())
    );
    // row profile of lateral recovery (row-mean |w2| ratio)
    {
        let w = spec.grid.width;
        print!("w2 row |.| ratios: ");
        for &a in &[16usize, 128, 256, 384, 496] {
            let me: f64 = (0..w).map(|l| disp.lateral()[a * w + l].abs()).sum::<f64>() / w as f64;
            let mt: f64 = (0..w).map(|l| truth.disp.lateral()[a * w + l].abs()).sum::<f64>() / w as f64;
            print!("{a}:{:.2} ", me / mt);
        }
        println!();
    }
    // interior statistics (8-pixel margin)
    {
        let (h, w) = (spec.grid.height, spec.grid.width);
        let mut se = 0.0; let mut sv = 0.0; let mut nn = 0usize;
        for a in 8..h-8 { for l in 8..w-8 {
            let i = a*w+l;
            se += est.e11[i];
            sv += epr.v_e[i];
            nn += 1;
        }}
        println!("interior mean e11 {:.5} ({:.2}% err)  interior mean epr {:.4}", se/nn as f64, 100.0*((se/nn as f64)+0.02).abs()/0.02, sv/nn as f64);
    }
    // data-term landscape along scaled true lateral displacement
    if std::env::var("TUNE_RAY").is_ok() {
        use elasto::warp::{warp_frame, data_loss};
        use elasto::grid::DispField;
        for s in [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 1.0, 1.1, 1.2] {
            let w2s: Vec<f64> = truth.disp.lateral().iter().map(|v| v * s).collect();
            // Condition on the solved axial field (not truth) to expose the
            // landscape the optimizer actually sees.
            let d = DispField::from_components(spec.grid, disp.axial().to_vec(), w2s).unwrap();
            let (warped, valid) = warp_frame(&pre, &d).unwrap();
            let ld = data_loss(pre.as_field(), &warped, &valid, 3).unwrap();
            // warp POST by the scaled field and compare against PRE
            let (warped2, valid2) = warp_frame(&post, &d).unwrap();
            let ld2 = data_loss(pre.as_field(), &warped2, &valid2, 3).unwrap();
            println!("s={s:.1}: self {ld:.5}, pair {ld2:.5}");
        }
    }
    // lateral-strain column profile (column means of e22 vs truth)
    {
        let (h, w) = (spec.grid.height, spec.grid.width);
        print!("e22 col-means est/truth: ");
        for &l in &[4usize, 16, 32, 48, 63, 80, 96, 112, 123] {
            let me: f64 = (0..h).map(|a| est.e22[a * w + l]).sum::<f64>() / h as f64;
            let mt: f64 = (0..h).map(|a| truth.strain.e22[a * w + l]).sum::<f64>() / h as f64;
            print!("{l}:{:.2} ", me / mt);
        }
        println!();
        print!("w2 col-means est vs truth: ");
        for &l in &[4usize, 32, 63, 96, 123] {
            let me: f64 = (0..h).map(|a| disp.lateral()[a * w + l]).sum::<f64>() / h as f64;
            let mt: f64 = (0..h).map(|a| truth.disp.lateral()[a * w + l]).sum::<f64>() / h as f64;
            print!("{l}:({:.3},{:.3}) ", me, mt);
        }
        println!();
    }
    // level transitions in the trace: first and last record per level
    let mut prev: Option<&elasto::solver::IterRecord> = None;
    for r in &report.records {
        let boundary = prev.map(|p| p.level != r.level).unwrap_or(true);
        if boundary {
            if let Some(p) = prev {
                println!("level {} end:   total {:.4e} l_d {:.4e} l_s1 {:.3e} l_s2 {:.3e} l_vd {:.3e} l_vs {:.3e}", p.level, p.total, p.terms.l_d, p.terms.l_s1, p.terms.l_s2, p.terms.l_vd, p.terms.l_vs);
            }
            println!("level {} start: total {:.4e} l_d {:.4e} l_s1 {:.3e} l_s2 {:.3e} l_vd {:.3e} l_vs {:.3e}", r.level, r.total, r.terms.l_d, r.terms.l_s1, r.terms.l_s2, r.terms.l_vd, r.terms.l_vs);
        }
        prev = Some(r);
    }
    if let Some(p) = prev {
        println!("level {} end:   total {:.4e} l_d {:.4e} l_s1 {:.3e} l_s2 {:.3e} l_vd {:.3e} l_vs {:.3e}", p.level, p.total, p.terms.l_d, p.terms.l_s1, p.terms.l_s2, p.terms.l_vd, p.terms.l_vs);
    }
}
