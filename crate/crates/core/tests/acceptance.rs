//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits nonzero if any fails. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 2 5`.

use bevground_core::disco::{assign, total_loss, LossTerms, LossWeights};
use bevground_core::engine::{
    ablation_run, evaluate, gradcheck, prepare, read_checkpoint, report_from_predictions, train,
    write_checkpoint, Accuracy, Checkpoint, EvalReport, RunConfig, ScoredPrediction,
};
use bevground_core::featurize::GridSpec;
use bevground_core::geometry::{iou_3d, iou_bev, Box3D};
use bevground_core::model::{ofs_select, propose_queries, rank_select, ModelConfig, ModelParams};
use bevground_core::rng::SeededRng;
use bevground_core::scenegen::{
    generate, parse_dataset, write_dataset, Category, Difficulty, SceneBounds, MAX_TOKENS, Vocabulary,
};
use bevground_core::tensor::{Graph, Tensor};
use std::f64::consts::PI;
use std::time::{Duration, Instant};

type Verdict = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant, what: &str) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("{what} took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn monotone(a: &Accuracy) -> bool {
    a.bev[1] <= a.bev[0] && a.d3[1] <= a.d3[0]
}

fn report_is_monotone(r: &EvalReport) -> bool {
    monotone(&r.overall) && r.per_category.iter().all(|c| monotone(&c.accuracy))
}

// 1 ------------------------------------------------------------------------

fn gradient_integrity() -> Verdict {
    let start = Instant::now();
    let checks = gradcheck::run_suite().map_err(|e| e.to_string())?;
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("nonempty suite");
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} {:.2e}", c.name, c.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    ensure(checks.iter().any(|c| c.name.starts_with("total_loss/")), || "no full-loss checks".into())?;
    within(Duration::from_secs(120), start, "grad check")?;
    let coords: usize = checks.iter().map(|c| c.coords).sum();
    Ok(format!(
        "{} checks, {coords} coordinates, worst {} {:.2e} <= {:e}",
        checks.len(),
        worst.name,
        worst.max_rel_error,
        gradcheck::TOLERANCE
    ))
}

// 2 ------------------------------------------------------------------------

fn random_box(rng: &mut SeededRng, near: Option<&Box3D>) -> Box3D {
    let (cx, cy, cz) = match near {
        Some(b) => (b.cx + rng.range(-2.0, 2.0), b.cy + rng.range(-2.0, 2.0), b.cz + rng.range(-1.0, 1.0)),
        None => (rng.range(-5.0, 5.0), rng.range(-5.0, 5.0), rng.range(-1.0, 1.0)),
    };
    let size = [rng.range(0.5, 4.0), rng.range(0.5, 4.0), rng.range(0.5, 3.0)];
    Box3D::new([cx, cy, cz], size, rng.range(-PI, PI)).expect("positive size")
}

fn inside(b: &Box3D, p: [f64; 3]) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.l / 2.0 && v.abs() <= b.w / 2.0 && (p[2] - b.cz).abs() <= b.h / 2.0
}

/// IoU from uniform samples inside the smaller box.
fn monte_carlo_iou(a: &Box3D, b: &Box3D, samples: usize, rng: &mut SeededRng) -> f64 {
    let (va, vb) = (a.l * a.w * a.h, b.l * b.w * b.h);
    let (small, other, vs, vo) = if va <= vb { (a, b, va, vb) } else { (b, a, vb, va) };
    let (s, c) = small.yaw.sin_cos();
    let mut hits = 0usize;
    for _ in 0..samples {
        let u = rng.range(-0.5, 0.5) * small.l;
        let v = rng.range(-0.5, 0.5) * small.w;
        let z = small.cz + rng.range(-0.5, 0.5) * small.h;
        let p = [small.cx + c * u - s * v, small.cy + s * u + c * v, z];
        if inside(other, p) {
            hits += 1;
        }
    }
    let inter = hits as f64 / samples as f64 * vs;
    inter / (vs + vo - inter)
}

fn geometry_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = SeededRng::new(20_240_602);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for i in 0..200 {
        let a = random_box(&mut rng, None);
        let b = if i % 10 == 9 { random_box(&mut rng, None) } else { random_box(&mut rng, Some(&a)) };
        let exact = iou_3d(&a, &b);
        let mc = monte_carlo_iou(&a, &b, 100_000, &mut rng);
        worst = worst.max((exact - mc).abs());
        if exact > 0.0 {
            overlapping += 1;
        }
        ensure((exact - mc).abs() <= 0.01, || format!("pair {i}: iou {exact} vs monte carlo {mc}"))?;
        ensure((iou_3d(&b, &a) - exact).abs() <= 1e-9, || format!("pair {i}: asymmetric"))?;
        ensure((iou_bev(&b, &a) - iou_bev(&a, &b)).abs() <= 1e-9, || format!("pair {i}: bev asymmetric"))?;
        let spun = Box3D { yaw: a.yaw + 2.0 * PI, ..a };
        let back = Box3D { yaw: b.yaw - 2.0 * PI, ..b };
        ensure((iou_3d(&spun, &b) - exact).abs() <= 1e-9 && (iou_3d(&a, &back) - exact).abs() <= 1e-9, || {
            format!("pair {i}: not 2π-invariant")
        })?;
    }
    within(Duration::from_secs(60), start, "geometry oracle")?;
    Ok(format!("200 pairs ({overlapping} overlapping), max |iou - mc| = {worst:.4}"))
}

// 3 ------------------------------------------------------------------------

struct OracleMatch {
    nearest: usize,
    object: Option<usize>,
    is_target: bool,
}

/// Exhaustive reference: integer coordinates, squared distances compared
/// exactly, ties to the lower object index, strict threshold.
fn assign_oracle(queries: &[[i64; 2]], centers: &[[i64; 2]], target: usize, tau: f64) -> (Vec<OracleMatch>, Vec<usize>) {
    let mut out = Vec::new();
    let mut referential: Vec<usize> = Vec::new();
    for q in queries {
        let d2: Vec<i64> = centers
            .iter()
            .map(|c| (q[0] - c[0]).pow(2) + (q[1] - c[1]).pow(2))
            .collect();
        let mut nearest = 0;
        for j in 0..centers.len() {
            let mut beaten = false;
            for k in 0..centers.len() {
                if d2[k] < d2[j] || (d2[k] == d2[j] && k < j) {
                    beaten = true;
                }
            }
            if !beaten {
                nearest = j;
            }
        }
        let object = ((d2[nearest] as f64) < tau * tau).then_some(nearest);
        if let Some(j) = object {
            if j != target && !referential.contains(&j) {
                referential.push(j);
            }
        }
        out.push(OracleMatch {
            nearest,
            object,
            is_target: object == Some(target),
        });
    }
    referential.sort();
    (out, referential)
}

fn assignment_fidelity() -> Verdict {
    let start = Instant::now();
    let mut rng = SeededRng::new(77);
    let taus = [0.0, 1.0, 2.0, 2.5, 3.0, 5.0];
    let (mut ties, mut boundary, mut with_referential) = (0, 0, 0);
    for inst in 0..100 {
        let n_obj = 1 + rng.index(6);
        let n_q = 1 + rng.index(10);
        let coord = |rng: &mut SeededRng| [rng.index(9) as i64 - 4, rng.index(9) as i64 - 4];
        let centers: Vec<[i64; 2]> = (0..n_obj).map(|_| coord(&mut rng)).collect();
        let queries: Vec<[i64; 2]> = (0..n_q).map(|_| coord(&mut rng)).collect();
        let target = rng.index(n_obj);
        let tau = taus[rng.index(taus.len())];
        let boxes: Vec<Box3D> = centers
            .iter()
            .map(|c| Box3D::new([c[0] as f64, c[1] as f64, 0.0], [1.0, 1.0, 1.0], 0.0).expect("unit box"))
            .collect();
        let qf: Vec<[f64; 2]> = queries.iter().map(|q| [q[0] as f64, q[1] as f64]).collect();
        let got = assign(&qf, &boxes, target, tau).map_err(|e| format!("instance {inst}: {e}"))?;
        let (want, want_ref) = assign_oracle(&queries, &centers, target, tau);
        for (qi, (g, w)) in got.matches.iter().zip(&want).enumerate() {
            ensure(g.nearest == w.nearest && g.object == w.object && g.is_target == w.is_target, || {
                format!(
                    "instance {inst} query {qi}: got ({}, {:?}, {}) want ({}, {:?}, {})",
                    g.nearest, g.object, g.is_target, w.nearest, w.object, w.is_target
                )
            })?;
        }
        ensure(got.matches.len() == want.len(), || format!("instance {inst}: query count"))?;
        ensure(got.referential == want_ref, || {
            format!("instance {inst}: referential {:?} want {:?}", got.referential, want_ref)
        })?;
        ensure(!got.referential.contains(&target), || format!("instance {inst}: target in R"))?;
        let joint = got.regression_queries(true);
        let solo = got.regression_queries(false);
        let want_joint: Vec<usize> = (0..n_q).filter(|q| want[*q].object.is_some()).collect();
        let want_solo: Vec<usize> = (0..n_q).filter(|q| want[*q].is_target).collect();
        ensure(joint == want_joint && solo == want_solo && got.target_queries() == want_solo, || {
            format!("instance {inst}: supervision sets differ")
        })?;

        for q in &queries {
            let d2: Vec<i64> = centers.iter().map(|c| (q[0] - c[0]).pow(2) + (q[1] - c[1]).pow(2)).collect();
            let min = *d2.iter().min().expect("objects");
            if d2.iter().filter(|d| **d == min).count() > 1 {
                ties += 1;
            }
            if (min as f64) == tau * tau {
                boundary += 1;
            }
        }
        if !want_ref.is_empty() {
            with_referential += 1;
        }
    }
    ensure(ties > 0 && boundary > 0, || format!("fixture lacks ties ({ties}) or boundary cases ({boundary})"))?;
    within(Duration::from_secs(10), start, "assignment oracle")?;
    Ok(format!(
        "100 instances exact; {ties} tied queries, {boundary} at distance = tau, {with_referential} with nonempty R"
    ))
}

// 4 ------------------------------------------------------------------------

fn weighted(terms: [f64; 4], w: &LossWeights) -> Result<f64, String> {
    let mut g = Graph::new();
    let [hm, qp, cls, reg] = terms.map(|v| g.constant(Tensor::scalar(v)));
    let (total, breakdown) =
        total_loss(&mut g, LossTerms { hm, qp, cls, reg }, w).map_err(|e| e.to_string())?;
    ensure(g.item(total) == breakdown.total, || "graph and breakdown disagree".into())?;
    Ok(breakdown.total)
}

fn loss_constants() -> Verdict {
    let w = LossWeights::default();
    ensure([w.hm, w.qp, w.cls, w.reg] == [1.0, 0.5, 0.5, 1.25], || format!("default weights {w:?}"))?;
    let total = weighted([1.0; 4], &w)?;
    ensure(total == 3.25, || format!("(1,1,1,1) gave {total}"))?;
    let terms = [0.3, 0.7, 1.1, 1.9];
    for i in 0..4 {
        let mut lambda = [0.0; 4];
        lambda[i] = 1.0;
        let w = LossWeights {
            hm: lambda[0],
            qp: lambda[1],
            cls: lambda[2],
            reg: lambda[3],
        };
        let got = weighted(terms, &w)?;
        ensure(got == terms[i], || format!("lambda {} alone gave {got}, want {}", i + 1, terms[i]))?;
        let mut doubled = lambda;
        doubled[i] = 2.0;
        let w2 = LossWeights {
            hm: doubled[0],
            qp: doubled[1],
            cls: doubled[2],
            reg: doubled[3],
        };
        ensure(weighted(terms, &w2)? == 2.0 * terms[i], || format!("lambda {} does not scale", i + 1))?;
    }
    Ok("(1,1,1,1) -> 3.25 exactly; each lambda isolates and scales its term".into())
}

// 5 ------------------------------------------------------------------------

/// Brute force: forced slots first, then repeatedly the best remaining.
fn select_oracle(scores: &[f64], keys: &[usize], count: usize, forced: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for f in forced {
        if out.len() < count && !out.contains(f) {
            out.push(*f);
        }
    }
    while out.len() < count {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if out.contains(&i) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if scores[i] > scores[b] || (scores[i] == scores[b] && keys[i] < keys[b]) => Some(i),
                keep => keep,
            };
        }
        out.push(best.expect("enough candidates"));
    }
    out
}

fn small_model(h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        grid: GridSpec {
            x_range: (0.0, h as f64),
            y_range: (0.0, w as f64),
            z_range: (-3.0, 5.0),
            voxel: [1.0, 1.0, 8.0],
        },
        d: 8,
        v: 6,
        k: 3,
        n_e: 1,
        n_d: 1,
        heads: 2,
        ofs: true,
        vocab_size: Vocabulary::standard().len(),
        max_tokens: MAX_TOKENS,
    }
}

fn random_tensor(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(-1.0, 1.0)).collect()).expect("sized")
}

fn selection_oracles() -> Verdict {
    let mut rng = SeededRng::new(5);
    let (mut tied_maps, mut forced_cases) = (0, 0);

    // Quantized score maps, so ties are common.
    for m in 0..100 {
        let (h, w) = (2 + rng.index(8), 2 + rng.index(8));
        let n = h * w;
        let scores: Vec<f64> = (0..n).map(|_| rng.index(6) as f64 / 5.0).collect();
        let keys: Vec<usize> = (0..n).collect();
        let count = 1 + rng.index(n);
        let forced: Vec<usize> = (0..rng.index(4)).map(|_| rng.index(n)).collect();
        let got = rank_select(&scores, &keys, count, &forced).map_err(|e| e.to_string())?;
        ensure(got == select_oracle(&scores, &keys, count, &forced), || format!("rank map {m} differs"))?;
        if scores.iter().enumerate().any(|(i, s)| scores[..i].contains(s)) {
            tied_maps += 1;
        }
    }

    // Heatmap-driven token selection through the network.
    for m in 0..100 {
        let (h, w) = (3 + rng.index(6), 3 + rng.index(6));
        let cfg = small_model(h, w);
        let params = ModelParams::init(&cfg, m as u64);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let f_bev = g.constant(random_tensor(&mut rng, &[h, w, cfg.d]));
        let v = 1 + rng.index(h * w);
        let centers: Vec<usize> = (0..rng.index(4)).map(|_| rng.index(h * w)).collect();
        let forced = (!centers.is_empty()).then_some(centers.as_slice());
        if forced.is_some() {
            forced_cases += 1;
        }
        let (feats, sel, hm) = ofs_select(&mut g, &p, f_bev, v, forced).map_err(|e| e.to_string())?;
        let hmv = g.value(hm);
        let c = hmv.shape()[2];
        let scores: Vec<f64> = (0..h * w)
            .map(|cell| (0..c).map(|ch| hmv.data()[cell * c + ch]).fold(f64::MIN, f64::max))
            .collect();
        let keys: Vec<usize> = (0..h * w).collect();
        let want = select_oracle(&scores, &keys, v, &centers);
        ensure(sel.positions == want, || format!("ofs map {m}: {:?} want {:?}", sel.positions, want))?;
        let mut distinct = centers.clone();
        distinct.sort();
        distinct.dedup();
        ensure(sel.injected == distinct.len().min(v), || format!("ofs map {m}: injected {}", sel.injected))?;
        let fb = g.value(f_bev).clone();
        let fv = g.value(feats);
        for (row, cell) in want.iter().enumerate() {
            ensure(fv.row(row) == &fb.data()[cell * cfg.d..(cell + 1) * cfg.d], || {
                format!("ofs map {m}: token {row} features")
            })?;
        }
    }

    // Query proposals over shuffled token positions.
    for m in 0..100 {
        let cfg = small_model(8, 8);
        let params = ModelParams::init(&cfg, 1000 + m as u64);
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let v = 2 + rng.index(20);
        let mut cells: Vec<usize> = (0..64).collect();
        rng.shuffle(&mut cells);
        let positions: Vec<usize> = cells[..v].to_vec();
        let f_tv = g.constant(random_tensor(&mut rng, &[v, cfg.d]));
        let k = 1 + rng.index(v);
        let target_cell = match m % 3 {
            0 => None,
            1 => Some(positions[rng.index(v)]),
            _ => Some(cells[v + rng.index(64 - v)]),
        };
        let (_, set, conf) = propose_queries(&mut g, &p, f_tv, &positions, k, target_cell).map_err(|e| e.to_string())?;
        let forced: Vec<usize> = target_cell
            .and_then(|t| positions.iter().position(|c| *c == t))
            .into_iter()
            .collect();
        if !forced.is_empty() {
            forced_cases += 1;
        }
        let want = select_oracle(g.value(conf).data(), &positions, k, &forced);
        ensure(set.tokens == want, || format!("proposal map {m}: {:?} want {:?}", set.tokens, want))?;
        let want_cells: Vec<usize> = want.iter().map(|t| positions[*t]).collect();
        ensure(set.positions == want_cells, || format!("proposal map {m}: cells"))?;
        ensure(set.injected_target == (!forced.is_empty()).then_some(0), || format!("proposal map {m}: injected flag"))?;
    }
    Ok(format!(
        "300 maps match brute force ({tied_maps} with tied scores, {forced_cases} with forced injection)"
    ))
}

// 6 ------------------------------------------------------------------------

fn overfit_sanity() -> Verdict {
    let start = Instant::now();
    let mut cfg = RunConfig::desk();
    cfg.batch_size = 1;
    cfg.epochs = 100;
    cfg.lr_max = 2e-3;
    let scenes = generate(1, 20, Difficulty::Easy, SceneBounds::default()).map_err(|e| e.to_string())?;
    let data = prepare(&scenes, &cfg).map_err(|e| e.to_string())?;
    let out = train(&data, &cfg).map_err(|e| e.to_string())?;
    let steps = out.curve.len();
    ensure(steps <= 2000, || format!("{steps} steps"))?;
    let (report, _) = evaluate(&data, &out.params, &cfg).map_err(|e| e.to_string())?;
    ensure(report_is_monotone(&report), || "non-monotone report".into())?;
    let acc = report.overall.d3[1];
    ensure(acc >= 90.0, || format!("train 3D Acc@0.5 = {acc:.2} after {steps} steps"))?;
    within(Duration::from_secs(15 * 60), start, "overfit run")?;
    Ok(format!(
        "3D Acc@0.5 {acc:.2} (Acc@0.25 {:.2}) on 20 easy scenarios after {steps} steps, {:.0}s",
        report.overall.d3[0],
        start.elapsed().as_secs_f64()
    ))
}

// 7 ------------------------------------------------------------------------

/// Compact sweep configuration; the rows differ only by the switches.
fn ablation_base() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.grid = GridSpec::square(ABLATION_EXTENT, 1.0);
    cfg.d = 16;
    cfg.heads = 2;
    cfg.v = 32;
    cfg.k = 8;
    cfg.batch_size = 4;
    cfg.epochs = 40;
    cfg.lr_max = 2e-3;
    cfg
}

const ABLATION_EXTENT: f64 = 16.0;

fn ablation_ordering() -> Verdict {
    let start = Instant::now();
    let bounds = SceneBounds { extent: ABLATION_EXTENT };
    let train_set = generate(100, 512, Difficulty::Ambiguous, bounds).map_err(|e| e.to_string())?;
    let test_set = generate(7_000_100, 128, Difficulty::Ambiguous, bounds).map_err(|e| e.to_string())?;
    let base = ablation_base();
    let table = ablation_run(&train_set, &test_set, &base, &[0, 1, 2], &mut |label, seed, acc| {
        println!("    {label:<10} seed {seed}  3D@0.25 {:6.2}  3D@0.5 {:6.2}", acc[0], acc[1]);
    })
    .map_err(|e| e.to_string())?;
    for line in table.to_table().lines() {
        println!("    {line}");
    }
    let acc = |label: &str| table.row(label).expect("row").mean()[0];
    let (full, no_ofs, no_disco, none) = (acc("full"), acc("w/o OFS"), acc("w/o DiSCo"), acc("w/o both"));
    let summary = format!(
        "Acc@0.25 full {full:.2}, w/o OFS {no_ofs:.2}, w/o DiSCo {no_disco:.2}, w/o both {none:.2}; {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(table.rows.iter().all(|r| r.per_seed.iter().all(|a| a[1] <= a[0])), || "non-monotone row".into())?;
    ensure(full > no_disco && full > no_ofs, || format!("full is not above both single ablations: {summary}"))?;
    ensure(none <= full.min(no_ofs).min(no_disco), || format!("w/o both is not the minimum: {summary}"))?;
    ensure(full - none >= 5.0, || format!("margin {:.2} < 5: {summary}", full - none))?;
    within(Duration::from_secs(2 * 3600), start, "ablation")?;
    Ok(summary)
}

// 8 ------------------------------------------------------------------------

fn scored(category: Category, iou_bev: f64, iou_3d: f64) -> ScoredPrediction {
    ScoredPrediction {
        id: String::new(),
        category,
        prediction: Box3D::new([0.0; 3], [1.0; 3], 0.0).expect("unit box"),
        probability: 0.5,
        iou_bev,
        iou_3d,
    }
}

fn aligned(cx: f64, h: f64) -> Box3D {
    Box3D::new([cx, 0.0, h / 2.0], [4.0, 2.0, h], 0.0).expect("positive size")
}

fn metric_correctness() -> Verdict {
    // Three scenarios with 3D IoUs 0.6, 0.4, 0.26.
    let three: Vec<_> = [0.6, 0.4, 0.26].iter().map(|i| scored(Category::Car, 0.9, *i)).collect();
    let r = report_from_predictions(&three);
    ensure(format!("{:.2}", r.overall.d3[1]) == "33.33" && r.overall.d3[0] == 100.0, || {
        format!("three-scenario fixture gave {:?}", r.overall.d3)
    })?;
    ensure(r.per_category.len() == 1 && r.per_category[0].category == Category::Car, || {
        "absent categories must be omitted".into()
    })?;

    // Five hand-placed predictions against a 4 x 2 x 2 box at the origin.
    let gt = aligned(0.0, 2.0);
    let placed = [
        (Category::Car, aligned(1.0, 2.0)),   // 12/20 = 0.6
        (Category::Car, aligned(2.0, 2.0)),   // 8/24 = 1/3
        (Category::Truck, gt),                // 1
        (Category::Truck, aligned(0.0, 1.0)), // 8/16 = 0.5, bev 1
        (Category::Bus, aligned(9.0, 2.0)),   // 0
    ];
    let preds: Vec<ScoredPrediction> = placed
        .iter()
        .map(|(c, p)| ScoredPrediction {
            id: String::new(),
            category: *c,
            prediction: *p,
            probability: 0.5,
            iou_bev: iou_bev(p, &gt),
            iou_3d: iou_3d(p, &gt),
        })
        .collect();
    let r = report_from_predictions(&preds);
    let want_rows = [
        (Category::Car, 2, [100.0, 50.0]),
        (Category::Truck, 2, [100.0, 100.0]),
        (Category::Bus, 1, [0.0, 0.0]),
    ];
    let rows: Vec<_> = r.per_category.iter().map(|c| (c.category, c.count, c.accuracy.d3)).collect();
    ensure(r.overall.d3 == [80.0, 60.0] && r.overall.bev == [80.0, 60.0] && rows == want_rows, || {
        format!("five-scenario fixture gave {:?} / {:?} / {rows:?}", r.overall.d3, r.overall.bev)
    })?;

    // Threshold monotonicity on random reports and on a trained model.
    let mut rng = SeededRng::new(8);
    for trial in 0..500 {
        let n = 1 + rng.index(30);
        let preds: Vec<_> = (0..n)
            .map(|_| {
                let c = *rng.pick(&Category::ALL);
                let i3 = if rng.uniform() < 0.2 { [0.25, 0.5][rng.index(2)] } else { rng.uniform() };
                scored(c, rng.uniform().max(i3), i3)
            })
            .collect();
        ensure(report_is_monotone(&report_from_predictions(&preds)), || format!("random report {trial}"))?;
    }
    let mut cfg = RunConfig::desk();
    cfg.grid = GridSpec::square(8.0, 1.0);
    cfg.d = 8;
    cfg.heads = 2;
    cfg.v = 12;
    cfg.k = 4;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    let scenes = generate(4, 8, Difficulty::Ambiguous, SceneBounds { extent: 8.0 }).map_err(|e| e.to_string())?;
    let data = prepare(&scenes, &cfg).map_err(|e| e.to_string())?;
    let out = train(&data, &cfg).map_err(|e| e.to_string())?;
    let (report, _) = evaluate(&data, &out.params, &cfg).map_err(|e| e.to_string())?;
    ensure(report_is_monotone(&report), || "trained report not monotone".into())?;
    Ok("fixtures reproduced exactly (33.33 / 100.0; 80/60 on five); Acc@0.5 <= Acc@0.25 on 501 reports".into())
}

// 9 ------------------------------------------------------------------------

fn determinism() -> Verdict {
    let dump = |seed: u64| -> Result<Vec<u8>, String> {
        let scenes = generate(seed, 6, Difficulty::Ambiguous, SceneBounds { extent: 8.0 }).map_err(|e| e.to_string())?;
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &scenes).map_err(|e| e.to_string())?;
        Ok(bytes)
    };
    let (a, b) = (dump(7)?, dump(7)?);
    ensure(a == b, || "dataset bytes differ".into())?;
    ensure(dump(8)? != a, || "seed has no effect".into())?;

    let scenes = parse_dataset(a.as_slice()).map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::desk();
    cfg.grid = GridSpec::square(8.0, 1.0);
    cfg.d = 8;
    cfg.heads = 2;
    cfg.v = 12;
    cfg.k = 4;
    cfg.n_d = 1;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    let run = || -> Result<(String, String), String> {
        let data = prepare(&scenes, &cfg).map_err(|e| e.to_string())?;
        let out = train(&data, &cfg).map_err(|e| e.to_string())?;
        let ck = write_checkpoint(&Checkpoint {
            config: cfg.clone(),
            params: out.params,
        });
        let loaded = read_checkpoint(&ck, "memory").map_err(|e| e.to_string())?;
        let (report, preds) = evaluate(&data, &loaded.params, &loaded.config).map_err(|e| e.to_string())?;
        let mut text = report.to_jsonl() + &report.to_table();
        for p in &preds {
            text += &serde_json::to_string(p).map_err(|e| e.to_string())?;
        }
        Ok((ck, text))
    };
    let (ck1, rep1) = run()?;
    let (ck2, rep2) = run()?;
    ensure(ck1 == ck2, || "checkpoints differ".into())?;
    ensure(rep1 == rep2, || "reports differ".into())?;
    Ok(format!(
        "dataset {} bytes, checkpoint {} bytes, report {} bytes identical across runs",
        a.len(),
        ck1.len(),
        rep1.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient integrity", gradient_integrity),
        ("geometry oracle", geometry_oracle),
        ("assignment fidelity", assignment_fidelity),
        ("loss constants", loss_constants),
        ("selection oracles", selection_oracles),
        ("overfit sanity", overfit_sanity),
        ("ablation ordering", ablation_ordering),
        ("metric correctness", metric_correctness),
        ("determinism", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
