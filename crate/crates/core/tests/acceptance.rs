//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero if any criterion fails. Run with
//! `cargo test --release -p jointnlu --test acceptance`.

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use jointnlu::config::RunConfig;
use jointnlu::corpus::{build_vocabs, load_split, synthetic, DatasetSplit, SplitName, Utterance, Vocabs};
use jointnlu::encoder::EncoderKind;
use jointnlu::metrics::{extract_spans, f1_score, slot_f1, Span};
use jointnlu::model::{JointModel, ModelConfig};
use jointnlu::numcore::{check_tape_gradients, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var};
use jointnlu::training::{
    check_model_gradients, evaluate, initial_params, load_checkpoint, metrics_csv, random_example, save_checkpoint,
    train, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const GRAD_MODEL_SEED: u64 = 0;
const GRAD_INIT_STD: f64 = 0.3;

const NORM_TOLERANCE: f64 = 1e-6;
const NORM_FORWARDS: usize = 1000;

const ORACLE_CORPORA: usize = 1000;

const OVERFIT_UTTERANCES: usize = 240;
const OVERFIT_EPOCHS: usize = 300;
const OVERFIT_TARGET: f64 = 0.99;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const OVERFIT_LR: f64 = 3e-3;

const ABLATION_SEEDS: u64 = 5;
const ABLATION_MIN_WINS: usize = 4;
const ABLATION_MIN_KINDS: usize = 2;
const ABLATION_EPOCHS: usize = 25;
const ABLATION_LR: f64 = 5e-3;

const ATIS_COUNTS: [usize; 3] = [4478, 500, 893];
const ATIS_SLOT_LABELS: usize = 120;
const ATIS_INTENTS: usize = 21;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn main() -> ExitCode {
    let checks: [(&str, Check); 8] = [
        ("gradient suite", gradient_suite),
        ("normalization suite", normalization_suite),
        ("metric oracle", metric_oracle),
        ("overfit run", overfit_run),
        ("coupling properties", coupling_properties),
        ("ablation trend", ablation_trend),
        ("data-loading counts", atis_counts),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} {name}: {detail} ({secs:.1}s)");
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// Gradient suite.

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

// Weighted random sum of every output coordinate.
fn project(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> jointnlu::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, t.dims(y));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type OpBuilder = Box<dyn Fn(&mut Tape<'_, f64>, &dyn Fn(&str) -> ParamId) -> jointnlu::Result<Var>>;

fn op_builders() -> Vec<(&'static str, OpBuilder)> {
    vec![
        (
            "add",
            Box::new(|t, p| {
                let (a, b) = (t.param(p("a")), t.param(p("b")));
                t.add(a, b)
            }),
        ),
        (
            "sub",
            Box::new(|t, p| {
                let (a, b) = (t.param(p("a")), t.param(p("b")));
                t.sub(a, b)
            }),
        ),
        (
            "mul",
            Box::new(|t, p| {
                let (a, b) = (t.param(p("a")), t.param(p("b")));
                t.mul(a, b)
            }),
        ),
        (
            "scale",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                Ok(t.scale(a, -1.3))
            }),
        ),
        (
            "sum",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                Ok(t.sum(a))
            }),
        ),
        (
            "gelu",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                Ok(t.gelu(a))
            }),
        ),
        (
            "sigmoid",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                Ok(t.sigmoid(a))
            }),
        ),
        (
            "tanh",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                Ok(t.tanh(a))
            }),
        ),
        (
            "softmax",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                t.softmax(a)
            }),
        ),
        (
            "layer_norm",
            Box::new(|t, p| {
                let (a, g, b) = (t.param(p("a")), t.param(p("gain")), t.param(p("v")));
                t.layer_norm(a, g, b)
            }),
        ),
        (
            "affine",
            Box::new(|t, p| {
                let (a, w, b) = (t.param(p("a")), t.param(p("w")), t.param(p("bias")));
                t.affine(a, w, Some(b))
            }),
        ),
        (
            "position_affine",
            Box::new(|t, p| {
                let (a, w, b) = (t.param(p("a")), t.param(p("w3")), t.param(p("b3")));
                t.position_affine(a, w, b)
            }),
        ),
        (
            "matmul",
            Box::new(|t, p| {
                let (a, m) = (t.param(p("a")), t.param(p("m")));
                t.matmul(a, m, false)
            }),
        ),
        (
            "matmul_transposed",
            Box::new(|t, p| {
                let (a, b) = (t.param(p("a")), t.param(p("b")));
                t.matmul(a, b, true)
            }),
        ),
        (
            "repeat_rows",
            Box::new(|t, p| {
                let v = t.param(p("v"));
                t.repeat_rows(v, 3)
            }),
        ),
        (
            "concat_slice",
            Box::new(|t, p| {
                let (a, b) = (t.param(p("a")), t.param(p("b")));
                let c = t.concat_last(a, b)?;
                t.slice_last(c, 2, 4)
            }),
        ),
        (
            "slice_rows_flatten_reshape",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                let r = t.slice_rows(a, 1, 2)?;
                let f = t.flatten(r)?;
                t.reshape(f, vec![4, 2])
            }),
        ),
        (
            "stack_rows",
            Box::new(|t, p| {
                let (a, v) = (t.param(p("a")), t.param(p("v")));
                let r = t.slice_rows(a, 2, 1)?;
                t.stack_rows(&[v, r, v])
            }),
        ),
        (
            "gather_rows",
            Box::new(|t, p| {
                let tb = t.param(p("table"));
                t.gather_rows(tb, &[1, 4, 1, 0])
            }),
        ),
        (
            "cross_entropy",
            Box::new(|t, p| {
                let v = t.param(p("v"));
                let probs = t.softmax(v)?;
                t.cross_entropy(probs, 2)
            }),
        ),
        (
            "nll",
            Box::new(|t, p| {
                let a = t.param(p("a"));
                let probs = t.softmax(a)?;
                t.nll(probs, &[0, 3, 2], &[1.0, 0.0, 2.0])
            }),
        ),
    ]
}

fn op_store(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, dims) in [
        ("a", vec![3, 4]),
        ("b", vec![3, 4]),
        ("w", vec![5, 4]),
        ("bias", vec![5]),
        ("w3", vec![3, 2, 4]),
        ("b3", vec![3, 2]),
        ("m", vec![4, 5]),
        ("v", vec![4]),
        ("gain", vec![4]),
        ("table", vec![6, 4]),
    ] {
        s.add(name, random_tensor(&mut rng, &dims)).unwrap();
    }
    s
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..5 {
        let s = op_store(seed);
        let id = |n: &str| s.id(n).unwrap();
        for (name, build) in op_builders() {
            let r = check_tape_gradients(
                &s,
                |t| {
                    let y = build(t, &id)?;
                    project(t, y, seed + 100)
                },
                GRAD_EPS,
                0,
            );
            checks += 1;
            match r {
                Ok(r) if r.max_rel_err() < GRAD_TOLERANCE => worst = worst.max(r.max_rel_err()),
                Ok(r) => problems.push(format!("{name}/seed{seed} {:.2e}", r.max_rel_err())),
                Err(e) => problems.push(format!("{name}/seed{seed}: {e}")),
            }
        }
    }
    let variants: [(&str, fn(&mut ModelConfig)); 4] = [
        ("default", |_| {}),
        ("tied", |c| c.tie_positions = true),
        ("detached", |c| c.detach_links = true),
        ("unidirectional", |c| c.bidirectional = false),
    ];
    for kind in [EncoderKind::Transformer, EncoderKind::Lstm, EncoderKind::Gru] {
        for (vname, apply) in variants {
            {
                let seed = GRAD_MODEL_SEED;
                let mut cfg = ModelConfig::tiny(kind, 10);
                cfg.init_std = GRAD_INIT_STD;
                apply(&mut cfg);
                checks += 1;
                match check_model_gradients(&cfg, GRAD_EPS, seed) {
                    Ok(r) if r.max_rel_err() < GRAD_TOLERANCE => worst = worst.max(r.max_rel_err()),
                    Ok(r) => problems.push(format!("{kind}/{vname}/seed{seed}: {}", worst_group(&r))),
                    Err(e) => problems.push(format!("{kind}/{vname}/seed{seed}: {e}")),
                }
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > GRAD_BUDGET {
        problems.push(format!("took {elapsed:?}, budget {GRAD_BUDGET:?}"));
    }
    let detail = format!("{checks} checks, max rel err {worst:.2e} < {GRAD_TOLERANCE:e}");
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            detail
        } else {
            format!("{detail}; {}", problems.join("; "))
        },
    )
}

fn worst_group(r: &GradCheckReport) -> String {
    let g = r
        .groups
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    format!("{} {:.2e}", g.name, g.max_rel_err)
}

// Normalization suite.

fn random_model_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let kind = [EncoderKind::Transformer, EncoderKind::Lstm, EncoderKind::Gru][rng.gen_range(0..3)];
    let mut cfg = ModelConfig::tiny(kind, rng.gen_range(5..30));
    cfg.encoder.seq_len = rng.gen_range(4..12);
    cfg.encoder.stacks = rng.gen_range(1..3);
    cfg.num_intents = rng.gen_range(1..8);
    cfg.num_slots = rng.gen_range(1..10);
    cfg.tie_positions = rng.gen();
    cfg.bidirectional = rng.gen();
    cfg.encoder.standard_pre_norm = rng.gen();
    cfg.init_std = [0.02, 0.5, 3.0][rng.gen_range(0..3)];
    cfg
}

fn row_sums_ok<T: jointnlu::numcore::Real>(t: &Tensor<T>) -> Result<(), f64> {
    let width = *t.dims().last().unwrap();
    let mut worst: f64 = 0.0;
    for row in t.data().chunks(width) {
        let s: f64 = row.iter().map(|v| v.to_f64().unwrap()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    if worst <= NORM_TOLERANCE {
        Ok(())
    } else {
        Err(worst)
    }
}

fn normalization_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = Vec::new();
    let mut rows = 0;
    for i in 0..NORM_FORWARDS {
        let cfg = random_model_config(&mut rng);
        let model = JointModel::new(cfg.clone()).unwrap();
        let ex = random_example(&cfg, i as u64);
        let mut ids = ex.token_ids.clone();
        // Occasionally an utterance filling every position.
        if rng.gen_bool(0.3) {
            let n = ids.len();
            for id in &mut ids[1..n - 1] {
                *id = rng.gen_range(0..cfg.vocab_size);
            }
        }
        let (f32_out, f64_out) = (
            model.predict(&model.init_params::<f32>(i as u64), &ids).unwrap(),
            model.predict(&model.init_params::<f64>(i as u64), &ids).unwrap(),
        );
        for t in [
            &f32_out.p_intent,
            &f32_out.slot_probs,
            &f32_out.probe_probs,
            &f32_out.intent_probs,
        ] {
            rows += t.len() / t.dims().last().unwrap();
            if let Err(e) = row_sums_ok(t) {
                bad.push(format!("forward {i} (f32): off by {e:.2e}"));
            }
        }
        for t in [
            &f64_out.p_intent,
            &f64_out.slot_probs,
            &f64_out.probe_probs,
            &f64_out.intent_probs,
        ] {
            rows += t.len() / t.dims().last().unwrap();
            if let Err(e) = row_sums_ok(t) {
                bad.push(format!("forward {i} (f64): off by {e:.2e}"));
            }
        }
    }
    let detail = format!("{NORM_FORWARDS} random forwards in f32 and f64, {rows} rows within {NORM_TOLERANCE:e}");
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            detail
        } else {
            bad.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    )
}

// Metric oracle: spans enumerated as every (start, end, type) triple and
// accepted by the chunk definition directly.

fn tag_type(tag: &str) -> Option<(char, &str)> {
    let (p, t) = tag.split_once('-')?;
    Some((p.chars().next().unwrap(), t))
}

fn brute_spans(tags: &[String], strict: bool) -> Vec<Span> {
    let n = tags.len();
    let types: HashSet<&str> = tags.iter().filter_map(|t| tag_type(t).map(|(_, ty)| ty)).collect();
    let mut out = Vec::new();
    for &ty in &types {
        let is = |i: usize, p: char| tag_type(&tags[i]) == Some((p, ty));
        let of_type = |i: usize| matches!(tag_type(&tags[i]), Some((_, t)) if t == ty);
        for s in 0..n {
            let opens = is(s, 'B') || (!strict && is(s, 'I') && (s == 0 || !of_type(s - 1)));
            if !opens {
                continue;
            }
            for e in s..n {
                let body = (s + 1..=e).all(|j| is(j, 'I'));
                let closed = e + 1 == n || !is(e + 1, 'I');
                if body && closed {
                    out.push(Span {
                        label: ty.to_string(),
                        start: s,
                        end: e,
                    });
                }
            }
        }
    }
    out.sort_by_key(|a| a.start);
    out
}

fn random_tags(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| match rng.gen_range(0..7) {
            0 | 1 => "O".to_string(),
            2 | 3 => format!("B-{}", ["a", "b", "c"][rng.gen_range(0..3)]),
            _ => format!("I-{}", ["a", "b", "c"][rng.gen_range(0..3)]),
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = Vec::new();
    let mut sentences = 0;
    for c in 0..ORACLE_CORPORA {
        let size = rng.gen_range(1..8);
        let gold: Vec<Vec<String>> = (0..size)
            .map(|_| {
                let n = rng.gen_range(0..12);
                random_tags(&mut rng, n)
            })
            .collect();
        let pred: Vec<Vec<String>> = gold
            .iter()
            .map(|g| {
                let mut p = g.clone();
                for t in &mut p {
                    if rng.gen_bool(0.3) {
                        *t = random_tags(&mut rng, 1).remove(0);
                    }
                }
                p
            })
            .collect();
        sentences += size;
        for strict in [false, true] {
            let (mut correct, mut predicted, mut gold_n) = (0, 0, 0);
            for (p, g) in pred.iter().zip(&gold) {
                let (bp, bg) = (brute_spans(p, strict), brute_spans(g, strict));
                let mut ep = extract_spans(p, strict).unwrap();
                ep.sort_by_key(|a| a.start);
                if ep != bp {
                    bad.push(format!("corpus {c}: spans of {p:?} (strict={strict})"));
                }
                predicted += bp.len();
                gold_n += bg.len();
                correct += bp.iter().filter(|s| bg.contains(s)).count();
            }
            let score = slot_f1(&pred, &gold, strict).unwrap();
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            let (pr, rc) = (ratio(correct, predicted), ratio(correct, gold_n));
            if (score.correct, score.predicted, score.gold) != (correct, predicted, gold_n)
                || score.precision != pr
                || score.recall != rc
                || score.f1 != f1_score(pr, rc)
                || score.f1 != if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) }
            {
                bad.push(format!(
                    "corpus {c}: slot_f1 {score:?} vs {correct}/{predicted}/{gold_n} (strict={strict})"
                ));
            }
        }
    }
    let detail = format!("{ORACLE_CORPORA} corpora, {sentences} sentences, lenient and strict chunking");
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            detail
        } else {
            bad.into_iter().take(3).collect::<Vec<_>>().join("; ")
        },
    )
}

// Training helpers.

fn tiny_run(kind: EncoderKind, lr: f64, epochs: usize, seed: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.encoder = kind;
    c.hidden_size = 16;
    c.stacks = 2;
    c.heads = 2;
    c.ffn_dim = 32;
    c.max_seq_len = synthetic::MAX_WORDS + 2;
    c.dropout = 0.0;
    c.init_std = 0.1;
    c.lr = lr;
    c.epochs = epochs;
    c.batch_size = 16;
    c.seed = seed;
    c.validate().unwrap();
    c
}

struct Trained {
    model: JointModel,
    vocabs: Vocabs,
    outcome: jointnlu::training::TrainOutcome,
}

fn fit(run: &RunConfig, train_set: &[Utterance], valid: &[Utterance]) -> jointnlu::Result<Trained> {
    let vocabs = build_vocabs(train_set)?;
    let model = JointModel::new(run.model_config(&vocabs))?;
    let split = DatasetSplit::encode(SplitName::Train, train_set, &vocabs, run.max_seq_len)?;
    let params = initial_params(&model, run, &vocabs)?;
    let outcome = train(
        &model,
        params,
        &split,
        valid,
        &vocabs,
        &TrainConfig::from_run(run),
        |_| {},
    )?;
    Ok(Trained { model, vocabs, outcome })
}

fn overfit_run() -> Outcome {
    let start = Instant::now();
    let data = synthetic::dataset(OVERFIT_UTTERANCES, 0, 0, 5);
    let run = tiny_run(EncoderKind::Transformer, OVERFIT_LR, OVERFIT_EPOCHS, 5);
    // Validating on the training utterances makes the log the training accuracy.
    let t = match fit(&run, &data.train, &data.train) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let elapsed = start.elapsed();
    let first = t.outcome.log.iter().find(|r| r.val_semantic_acc >= OVERFIT_TARGET);
    let best = t.outcome.log.iter().map(|r| r.val_semantic_acc).fold(0.0, f64::max);
    let ok = first.is_some() && elapsed <= OVERFIT_BUDGET;
    let reached = first.map_or("never".to_string(), |r| format!("epoch {}", r.epoch));
    verdict(
        ok,
        format!(
            "{} utterances, best training semantic acc {best:.4}, >= {OVERFIT_TARGET} at {reached}, {elapsed:?} of {OVERFIT_BUDGET:?}",
            data.train.len()
        ),
    )
}

// Coupling properties on the whole model.

fn bump(params: &ParamStore<f64>, id: ParamId, range: std::ops::Range<usize>) -> ParamStore<f64> {
    let mut p = params.clone();
    // Uneven across rows, so no softmax can absorb it as a shift.
    for (i, v) in p.get_mut(id).data_mut()[range].iter_mut().enumerate() {
        *v += 0.1 * (i % 7 + 1) as f64;
    }
    p
}

fn coupling_properties() -> Outcome {
    let mut failures = Vec::new();
    let mut cases = 0;
    for kind in [EncoderKind::Transformer, EncoderKind::Lstm, EncoderKind::Gru] {
        for seed in 0..3u64 {
            let mut cfg = ModelConfig::tiny(kind, 12);
            cfg.init_std = 0.3;
            let (d, ip, sp) = (cfg.encoder.hidden, cfg.num_intents, cfg.num_slots);
            let positions = cfg.encoder.seq_len - 1;
            let model = JointModel::new(cfg.clone()).unwrap();
            let hp = model.heads.clone();
            let params = model.init_params::<f64>(seed);
            let ids = random_example(&cfg, seed).token_ids;
            let run = |p: &ParamStore<f64>, m: &JointModel| m.predict(p, &ids).unwrap();
            let base = run(&params, &model);
            let w_i = 0..ip * d;

            // Live: W_I reaches the slot distributions, every W_S[n] reaches the intent.
            cases += 1;
            if run(&bump(&params, hp.w_intent, w_i.clone()), &model).slot_probs == base.slot_probs {
                failures.push(format!("{kind}/{seed}: W_I does not reach slot_probs"));
            }
            for n in 0..positions {
                cases += 1;
                let r = n * sp * d..(n + 1) * sp * d;
                if run(&bump(&params, hp.w_slot, r), &model).intent_probs == base.intent_probs {
                    failures.push(format!("{kind}/{seed}: W_S[{n}] does not reach intent_probs"));
                }
            }

            // Decoupled: zero the link columns.
            let mut cut = params.clone();
            for row in cut.get_mut(hp.v_slot).data_mut().chunks_mut(d + ip) {
                row[d..].fill(0.0);
            }
            for row in cut.get_mut(hp.v_intent).data_mut().chunks_mut(d + sp * positions) {
                row[d..].fill(0.0);
            }
            let base = run(&cut, &model);
            cases += 2;
            if run(&bump(&cut, hp.w_intent, w_i.clone()), &model).slot_probs != base.slot_probs {
                failures.push(format!("{kind}/{seed}: zeroed V_S links still see W_I"));
            }
            let all_ws = 0..positions * sp * d;
            if run(&bump(&cut, hp.w_slot, all_ws.clone()), &model).intent_probs != base.intent_probs {
                failures.push(format!("{kind}/{seed}: zeroed V_I links still see W_S"));
            }

            // Without the bidirectional layer neither probe is read.
            let mut off = cfg.clone();
            off.bidirectional = false;
            let off_model = JointModel::new(off).unwrap();
            let base = run(&params, &off_model);
            cases += 2;
            if run(&bump(&params, hp.w_intent, w_i), &off_model).slot_probs != base.slot_probs {
                failures.push(format!("{kind}/{seed}: bidirectional=off still sees W_I"));
            }
            if run(&bump(&params, hp.w_slot, all_ws), &off_model).intent_probs != base.intent_probs {
                failures.push(format!("{kind}/{seed}: bidirectional=off still sees W_S"));
            }
        }
    }
    let detail = format!("{cases} perturbation cases over 3 encoders");
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            detail
        } else {
            failures.join("; ")
        },
    )
}

// Ablation trend on a held-out split.

fn ablation_trend() -> Outcome {
    let mut lines = Vec::new();
    let mut kinds_ok = 0;
    for kind in [EncoderKind::Transformer, EncoderKind::Lstm, EncoderKind::Gru] {
        let mut wins = 0;
        let mut cells = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            let data = synthetic::dataset(300, 60, 300, 100 + seed);
            let mut acc = [0.0; 2];
            for (i, bidi) in [true, false].into_iter().enumerate() {
                let mut run = tiny_run(kind, ABLATION_LR, ABLATION_EPOCHS, seed);
                run.bidirectional = bidi;
                let t = match fit(&run, &data.train, &data.valid) {
                    Ok(t) => t,
                    Err(e) => return Outcome::Fail(format!("{kind}/seed{seed}: {e}")),
                };
                let report = evaluate(&t.model, &t.outcome.best_params, &t.vocabs, &data.test, false).unwrap();
                acc[i] = report.semantic_acc;
            }
            if acc[0] >= acc[1] {
                wins += 1;
            }
            cells.push(format!("{:.3}/{:.3}", acc[0], acc[1]));
        }
        if wins >= ABLATION_MIN_WINS {
            kinds_ok += 1;
        }
        lines.push(format!("{kind} on>=off {wins}/{ABLATION_SEEDS} [{}]", cells.join(" ")));
    }
    verdict(
        kinds_ok >= ABLATION_MIN_KINDS,
        format!(
            "{kinds_ok} kinds with >= {ABLATION_MIN_WINS} wins; {}",
            lines.join("; ")
        ),
    )
}

// ATIS counts.

fn atis_dir() -> PathBuf {
    std::env::var_os("JOINTNLU_ATIS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/atis"))
}

fn atis_counts() -> Outcome {
    let dir = atis_dir();
    if !dir.join("train").is_dir() {
        eprintln!("warning: no ATIS data at {}; set JOINTNLU_ATIS_DIR", dir.display());
        return Outcome::Skip(format!("ATIS not found at {}", dir.display()));
    }
    let mut counts = Vec::new();
    let mut train_set = Vec::new();
    for split in SplitName::ALL {
        match load_split(&dir, split) {
            Ok(u) => {
                counts.push(u.len());
                if split == SplitName::Train {
                    train_set = u;
                }
            }
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    }
    let vocabs = match build_vocabs(&train_set) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let (slots, intents) = (vocabs.slots.num_learned(), vocabs.intents.num_learned());
    verdict(
        counts == ATIS_COUNTS && slots == ATIS_SLOT_LABELS && intents == ATIS_INTENTS,
        format!("splits {counts:?}, {slots} slot labels, {intents} intents"),
    )
}

// Determinism.

fn determinism() -> Outcome {
    let data = synthetic::dataset(120, 40, 0, 9);
    let mut run = tiny_run(EncoderKind::Transformer, 3e-3, 4, 21);
    run.dropout = 0.1;
    let (a, b) = match (fit(&run, &data.train, &data.valid), fit(&run, &data.train, &data.valid)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
    };
    let (log_a, log_b) = (metrics_csv(&a.outcome.log), metrics_csv(&b.outcome.log));
    let logs_equal = log_a.as_bytes() == log_b.as_bytes();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &run, &a.vocabs, &a.outcome.final_params).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let bits = |p: &ParamStore<f32>| -> Vec<(String, Vec<usize>, Vec<u32>)> {
        p.iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    t.dims().to_vec(),
                    t.data().iter().map(|x| x.to_bits()).collect(),
                )
            })
            .collect()
    };
    let round_trip = bits(&loaded.params) == bits(&a.outcome.final_params)
        && loaded.config.to_text() == run.to_text()
        && loaded.vocabs.tokens.items() == a.vocabs.tokens.items()
        && loaded.vocabs.slots.items() == a.vocabs.slots.items()
        && loaded.vocabs.intents.items() == a.vocabs.intents.items();
    verdict(
        logs_equal && round_trip,
        format!(
            "metrics logs identical: {logs_equal} ({} bytes); checkpoint round trip bit-exact: {round_trip}",
            log_a.len()
        ),
    )
}
