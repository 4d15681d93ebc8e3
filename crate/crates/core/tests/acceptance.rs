//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its verdict line; exits non-zero if any criterion fails.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use gatedgcn::cli::{gradcheck_config, gradcheck_fixture};
use gatedgcn::consistency::{isc_loss, model_scores, ConsistencyParams, IscForm};
use gatedgcn::corpus::{build_graph, graph_distances, parse_corpus, serialize_corpus, Sentence};
use gatedgcn::gated_gcn::{apply_gates, gate_diversity_loss, gcn_layer};
use gatedgcn::tensor::{ParamSet, Tape, Tensor};
use gatedgcn::trainer::{checkpoint, evaluate, train, GatedGcnModel, LossBreakdown, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{
    dataset, dense_gcn, desk_config, model_for, random_heads, random_lookup, random_sentence,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!(
            "{what} took {:.1} s, limit {limit_s} s",
            elapsed.as_secs_f64()
        )
    })
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in [0, 1, 2] {
        let cfg = gradcheck_config(seed);
        ensure(
            cfg.gcn_layers == 2 && cfg.use_gates && cfg.use_diversity && cfg.use_consistency,
            || "fixture config must enable every term with two layers".into(),
        )?;
        let r = gradcheck_fixture(&cfg).map_err(|e| e.to_string())?;
        ensure(r.non_finite.is_empty(), || {
            format!("non-finite evaluations: {:?}", r.non_finite)
        })?;
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    within(start.elapsed(), 30.0, "gradient check")?;
    Ok(format!(
        "max relative error {worst:.2e} over {checked} coordinates, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn tree_distances() -> Outcome {
    let sentences = parse_corpus(common::TREES).map_err(|e| e.to_string())?;
    let cases: [(usize, usize, &[usize]); 2] = [
        (0, 3, &[1, 1, 0, 2, 2, 1, 2, 1, 1]),
        (1, 10, &[4, 3, 2, 4, 3, 2, 1, 2, 1, 0, 3]),
    ];
    for (ordinal, t, want) in cases {
        let got = graph_distances(&sentences[ordinal], t)
            .map_err(|e| e.to_string())?
            .distances;
        ensure(got == want, || {
            format!("sentence {ordinal}: {got:?} != {want:?}")
        })?;
    }
    Ok("both distance rows match exactly".into())
}

fn gcn_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=10);
        let (din, dout) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let heads = random_heads(n, &mut rng);
        let s = Sentence::new(
            vec!["x".into(); n],
            heads.clone(),
            vec!["dep".into(); n],
            vec!["None".into(); n],
        )
        .map_err(|e| e.to_string())?;
        let h = Tensor::uniform(vec![n, din], 3.0, &mut rng).unwrap();
        let w = Tensor::uniform(vec![din, dout], 3.0, &mut rng).unwrap();
        let want = dense_gcn(
            &heads,
            &(0..n).map(|i| h.row(i).to_vec()).collect::<Vec<_>>(),
            &(0..din).map(|i| w.row(i).to_vec()).collect::<Vec<_>>(),
        );
        let mut tape = Tape::new();
        let (hv, wv) = (tape.constant(h), tape.constant(w));
        let out = gcn_layer(&mut tape, hv, &build_graph(&s), wv).map_err(|e| e.to_string())?;
        for (i, row) in want.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                worst = worst.max((tape.value(out).get(i, c) - x).abs());
            }
        }
    }
    ensure(worst < 1e-10, || format!("max deviation {worst:.3e}"))?;
    within(start.elapsed(), 10.0, "oracle comparison")?;
    Ok(format!("100 trees, max deviation {worst:.1e}"))
}

fn distribution_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ParamSet::new();
    let (fd, gd, sd) = (6, 5, 4);
    let cp =
        ConsistencyParams::init(&mut params, fd, gd, sd, &mut rng).map_err(|e| e.to_string())?;
    let mut min_kl = f64::INFINITY;
    let mut max_self_kl = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=15);
        let s = random_sentence(n, &mut rng);
        let t = rng.gen_range(1..=n);
        let p = graph_distances(&s, t).map_err(|e| e.to_string())?.p_dist;
        // random weights each round so Q ranges from near uniform to peaked
        let scale = rng.gen_range(0.1..10.0);
        for id in [cp.w_feature, cp.w_filtered] {
            let shape = params.get(id).shape().to_vec();
            *params.get_mut(id) = Tensor::uniform(shape, scale, &mut rng).unwrap().with_grad();
        }
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::uniform(vec![1, fd], 3.0, &mut rng).unwrap());
        let m = tape.constant(Tensor::uniform(vec![n, gd], 3.0, &mut rng).unwrap());
        let q = model_scores(&mut tape, &params, v, m, &cp)
            .map_err(|e| e.to_string())?
            .q_dist;
        let psum: f64 = p.iter().sum();
        let qsum: f64 = tape.value(q).values().iter().sum();
        ensure((psum - 1.0).abs() <= 1e-6, || format!("P sums to {psum}"))?;
        ensure((qsum - 1.0).abs() <= 1e-6, || format!("Q sums to {qsum}"))?;
        let kl = isc_loss(&mut tape, &p, q, IscForm::Kl).map_err(|e| e.to_string())?;
        min_kl = min_kl.min(tape.scalar(kl));
        let pq = tape.constant(Tensor::matrix(1, n, p.clone()).unwrap());
        let self_kl = isc_loss(&mut tape, &p, pq, IscForm::Kl).map_err(|e| e.to_string())?;
        max_self_kl = max_self_kl.max(tape.scalar(self_kl).abs());
    }
    ensure(min_kl >= 0.0, || format!("KL reached {min_kl:.3e}"))?;
    ensure(max_self_kl < 1e-9, || {
        format!("KL(P,P) reached {max_self_kl:.3e}")
    })?;
    Ok(format!(
        "1000 draws, min KL {min_kl:.2e}, max KL(P,P) {max_self_kl:.1e}"
    ))
}

fn gate_diversity_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (n, d) = (rng.gen_range(1..=10), rng.gen_range(1..=16));
        let mut tape = Tape::new();
        let hidden: Vec<_> = (0..2)
            .map(|_| {
                let raw = Tensor::uniform(vec![n, d], 2.0, &mut rng).unwrap();
                let v = tape.constant(raw);
                // GCN outputs are post-ReLU half the time
                if rng.gen_bool(0.5) {
                    tape.relu(v).unwrap()
                } else {
                    v
                }
            })
            .collect();
        let gates: Vec<_> = (0..2)
            .map(|_| {
                let z = tape.constant(Tensor::uniform(vec![1, d], 4.0, &mut rng).unwrap());
                tape.sigmoid(z).unwrap()
            })
            .collect();
        let gated = apply_gates(&mut tape, &hidden, &gates).map_err(|e| e.to_string())?;
        let gd = gate_diversity_loss(&mut tape, &gated.pooled, false).map_err(|e| e.to_string())?;
        lo = lo.min(tape.scalar(gd));
        hi = hi.max(tape.scalar(gd));

        let same =
            apply_gates(&mut tape, &hidden, &[gates[0], gates[0]]).map_err(|e| e.to_string())?;
        let pooled_norm: f64 = tape
            .value(same.pooled[0][0])
            .values()
            .iter()
            .map(|x| x * x)
            .sum();
        if pooled_norm > 1e-2 {
            let gd_same =
                gate_diversity_loss(&mut tape, &same.pooled, false).map_err(|e| e.to_string())?;
            let v = tape.scalar(gd_same);
            ensure((v - 0.5).abs() <= 1e-6, || {
                format!("identical gates gave {v}")
            })?;
        }
    }
    ensure(lo >= -0.5 - 1e-6 && hi <= 0.5 + 1e-6, || {
        format!("range [{lo}, {hi}]")
    })?;
    Ok(format!(
        "1000 draws in [{lo:.3}, {hi:.3}], identical gates give 0.5"
    ))
}

fn breakdown(
    model: &GatedGcnModel,
    data: &gatedgcn::trainer::Dataset,
    ordinal: usize,
    t: usize,
) -> Result<(LossBreakdown, bool), String> {
    let s = &data.sentences[ordinal];
    let y = model
        .label_index(&s.gold_labels[t - 1])
        .ok_or("unknown label")?;
    let mut tape = Tape::new();
    let enc = model
        .encode_sentence(&mut tape, data, ordinal)
        .map_err(|e| e.to_string())?;
    let out = model
        .forward_candidate(&mut tape, s, &enc, t, Some(y))
        .map_err(|e| e.to_string())?;
    let passthrough = out.filtered == enc.layers;
    Ok((
        LossBreakdown::read(&tape, &out.losses.ok_or("no losses")?),
        passthrough,
    ))
}

fn ablation_exactness() -> Outcome {
    let data = dataset(common::SYNTHETIC);
    let base = common::small_config(21);
    let variant = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        model_for(c, &data)
    };
    let full = variant(&|_| {});
    let no_div = variant(&|c| c.use_diversity = false);
    let no_cons = variant(&|c| c.use_consistency = false);
    let no_gates = variant(&|c| c.use_gates = false);
    let no_gates_cons = variant(&|c| {
        c.use_gates = false;
        c.use_consistency = false;
    });
    let (a, b) = (base.alpha, base.beta);
    let mut checked = 0;
    for ordinal in 0..data.len() {
        for t in 1..=data.sentences[ordinal].len() {
            let (f, _) = breakdown(&full, &data, ordinal, t)?;
            let (gd, isc) = (f.gd.ok_or("missing gd")?, f.isc.ok_or("missing isc")?);
            ensure(f.total == f.ce + gd * a + isc * b, || {
                "full loss is not the weighted sum".into()
            })?;

            let (x, _) = breakdown(&no_div, &data, ordinal, t)?;
            ensure(x.gd.is_none() && x.ce == f.ce && x.isc == f.isc, || {
                "-Diversity changed other terms".into()
            })?;
            ensure(x.total == f.ce + isc * b, || "-Diversity total".into())?;

            let (x, _) = breakdown(&no_cons, &data, ordinal, t)?;
            ensure(x.isc.is_none() && x.ce == f.ce && x.gd == f.gd, || {
                "-Consistency changed other terms".into()
            })?;
            ensure(x.total == f.ce + gd * a, || "-Consistency total".into())?;

            let (g, pass) = breakdown(&no_gates, &data, ordinal, t)?;
            ensure(pass && g.gd.is_none(), || {
                "-Gates must pass layers through without diversity".into()
            })?;
            ensure(g.total == g.ce + g.isc.ok_or("missing isc")? * b, || {
                "-Gates total".into()
            })?;

            let (x, pass) = breakdown(&no_gates_cons, &data, ordinal, t)?;
            ensure(pass && x.gd.is_none() && x.isc.is_none(), || {
                "-Gates -Consistency terms".into()
            })?;
            ensure(x.ce == g.ce && x.total == g.ce, || {
                "-Gates -Consistency total".into()
            })?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} candidates, four ablation rows bitwise exact"
    ))
}

fn training_f1(cfg: &TrainConfig) -> Result<(f64, usize, Duration), String> {
    let data = dataset(common::SYNTHETIC);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let outcome = pool
        .install(|| train(cfg, random_lookup(cfg, &data), &data, &data))
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let f1 = pool
        .install(|| evaluate(&outcome.model, &data))
        .map_err(|e| e.to_string())?
        .f1;
    Ok((f1, outcome.best_epoch, elapsed))
}

fn desk_scale_learning() -> Outcome {
    let data = dataset(common::SYNTHETIC);
    let types: std::collections::BTreeSet<&str> = data
        .sentences
        .iter()
        .flat_map(|s| s.gold_labels.iter().map(String::as_str))
        .filter(|l| *l != "None")
        .collect();
    ensure(data.len() >= 20 && types.len() == 2, || {
        "synthetic corpus too small".into()
    })?;

    let full = desk_config(1);
    let (f_full, e_full, t_full) = training_f1(&full)?;
    let bare = TrainConfig {
        use_gates: false,
        use_diversity: false,
        use_consistency: false,
        ..full.clone()
    };
    let (f_bare, e_bare, t_bare) = training_f1(&bare)?;
    ensure(f_full >= 0.99, || {
        format!("full model training F1 {f_full:.3}")
    })?;
    ensure(f_bare >= 0.9, || {
        format!("ablated model training F1 {f_bare:.3}")
    })?;
    within(t_full, 300.0, "full training")?;
    within(t_bare, 300.0, "ablated training")?;
    Ok(format!(
        "full F1 {f_full:.3} (best epoch {e_full}, {:.1} s); no gates/diversity/consistency F1 {f_bare:.3} (best epoch {e_bare}, {:.1} s)",
        t_full.as_secs_f64(),
        t_bare.as_secs_f64()
    ))
}

fn determinism() -> Outcome {
    let data = dataset(common::SYNTHETIC);
    let cfg = TrainConfig {
        epochs: 5,
        ..desk_config(9)
    };
    let run = || {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        pool.install(|| train(&cfg, random_lookup(&cfg, &data), &data, &data))
            .map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    ensure(a.log_text() == b.log_text(), || "epoch logs differ".into())?;
    ensure(
        checkpoint::to_bytes(&a.model) == checkpoint::to_bytes(&b.model),
        || "checkpoints differ".into(),
    )?;
    // parallel evaluation must not change the report
    let parallel = evaluate(&a.model, &data).map_err(|e| e.to_string())?;
    ensure(parallel == a.log[a.best_epoch - 1].dev, || {
        "parallel evaluation differs".into()
    })?;
    Ok(format!(
        "{} epoch lines and {} checkpoint bytes identical",
        a.log.len(),
        checkpoint::to_bytes(&a.model).len()
    ))
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut texts = vec![common::SYNTHETIC.to_string(), common::TREES.to_string()];
    for _ in 0..50 {
        let k = rng.gen_range(1..5);
        let sents: Vec<Sentence> = (0..k)
            .map(|_| {
                let n = rng.gen_range(1..12);
                random_sentence(n, &mut rng)
            })
            .collect();
        texts.push(serialize_corpus(&sents));
    }
    for text in &texts {
        let first = parse_corpus(text).map_err(|e| e.to_string())?;
        let again = parse_corpus(&serialize_corpus(&first)).map_err(|e| e.to_string())?;
        ensure(first == again, || {
            "corpus round trip changed sentences".into()
        })?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dataset(common::SYNTHETIC);
    let cfg = TrainConfig {
        epochs: 2,
        ..desk_config(3)
    };
    let trained =
        train(&cfg, random_lookup(&cfg, &data), &data, &data).map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.ggcn"), dir.path().join("b.ggcn"));
    checkpoint::save(&trained.model, &p1).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&p1).map_err(|e| e.to_string())?;
    checkpoint::save(&loaded, &p2).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    ensure(b1 == b2, || "checkpoint bytes differ after reload".into())?;
    Ok(format!(
        "{} corpora, checkpoint of {} bytes",
        texts.len(),
        b1.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("reference tree distances", tree_distances),
        ("GCN oracle equivalence", gcn_oracle),
        ("distribution invariants", distribution_invariants),
        ("gate-diversity bounds", gate_diversity_bounds),
        ("ablation exactness", ablation_exactness),
        ("desk-scale learning", desk_scale_learning),
        ("determinism", determinism),
        ("round-trips", round_trips),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
