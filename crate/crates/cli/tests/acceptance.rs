//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE=1,2,6 cargo test -p rnn-encdec-cli --test acceptance` runs a
//! subset. The training criteria (3, 4, 5) take several minutes each;
//! `ACCEPTANCE_VERBOSE=1` reports their validation checks on stderr.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use encdec_cli::toytask::{self, Task, ToySpec};
use rnn_encdec::checkpoint;
use rnn_encdec::data::{build_vocab, PhrasePair, TokenId, Vocabulary, EOS};
use rnn_encdec::infer::{rescore_table, score_pair, top_samples, sample_from, RescoreOptions};
use rnn_encdec::linalg::{softmax_rows, Matrix};
use rnn_encdec::model::{encode, log_prob, output_distribution, CellKind, DecoderSession, ModelConfig, ModelParams};
use rnn_encdec::optim::{TrainConfig, Trainer};
use rnn_encdec::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// 1. Gradient fidelity through the CLI on the bundled tiny config.

fn gradient_fidelity() -> Outcome {
    let conf = repo_root().join("configs/tiny.conf");
    let mut notes = Vec::new();
    let mut ok = true;
    for cell in ["gated", "tanh"] {
        let t = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_encdec"))
            .args(["grad-check", "--config"])
            .arg(&conf)
            .args(["--set", &format!("cell={cell}"), "--seed", "1"])
            .output()
            .map_err(|e| format!("cannot run encdec: {e}"))?;
        let secs = t.elapsed().as_secs_f64();
        let stdout = String::from_utf8_lossy(&out.stdout);
        let fields: Vec<&str> = stdout.trim().split('\t').collect();
        let err: f64 = fields.get(1).and_then(|v| v.parse().ok()).unwrap_or(f64::INFINITY);
        let entries = fields.get(5).copied().unwrap_or("?");
        ok &= out.status.success() && err < 1e-4 && secs < 60.0;
        notes.push(format!("{cell}: max rel err {err:.2e} over {entries} entries in {secs:.1}s"));
    }
    check(ok, notes.join("; "))
}

// 2. Distribution sanity.

fn tiny_config(k_s: usize, k_t: usize, cell: CellKind) -> ModelConfig {
    ModelConfig {
        src_vocab: k_s,
        tgt_vocab: k_t,
        hidden: 8,
        embed: 5,
        maxout: 4,
        output_rank: 3,
        cell,
        bias: true,
    }
}

/// Probability mass of all EOS-terminated targets of each exact length
/// 1..=max_len, by walking the prefix tree.
fn mass_by_length(p: &ModelParams, src: &[TokenId], max_len: usize) -> Vec<f64> {
    fn walk(s: &DecoderSession<'_>, prefix_p: f64, depth: usize, max_len: usize, out: &mut [f64]) {
        let mut s = s.clone();
        let probs = s.step().unwrap();
        out[depth] += prefix_p * probs[EOS];
        if depth + 1 == max_len {
            return;
        }
        for (y, &py) in probs.iter().enumerate().skip(1) {
            let mut next = s.clone();
            next.feed(y);
            walk(&next, prefix_p * py, depth + 1, max_len, out);
        }
    }
    let mut out = vec![0.0; max_len];
    walk(&DecoderSession::new(src, p).unwrap(), 1.0, 0, max_len, &mut out);
    out
}

fn distribution_sanity() -> Outcome {
    let mut rng = Rng::new(2);
    let mut worst_row = 0.0f64;
    for _ in 0..50 {
        let (r, c) = (1 + rng.below(6), 1 + rng.below(40));
        let data = (0..r * c).map(|_| 50.0 * rng.gaussian()).collect();
        let s = softmax_rows(&Matrix::from_vec(r, c, data).unwrap());
        for i in 0..r {
            worst_row = worst_row.max((s.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    let cfg = tiny_config(7, 7, CellKind::Gated);
    let random = ModelParams::random(&cfg, 1.0, &mut rng).unwrap();
    for _ in 0..50 {
        let h: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let c: Vec<f64> = (0..8).map(|_| rng.gaussian()).collect();
        let probs = output_distribution(&h, Some(rng.below(7)), &c, &random).unwrap();
        worst_row = worst_row.max((probs.iter().sum::<f64>() - 1.0).abs());
    }

    let mut worst_zero = 0.0f64;
    for k_t in [3, 4, 7, 20] {
        let zero = ModelParams::zeros(&tiny_config(5, k_t, CellKind::Gated));
        for _ in 0..20 {
            let src = random_ids(5, 6, &mut rng);
            let tgt = random_ids(k_t, 9, &mut rng);
            let expect = tgt.len() as f64 * (1.0 / k_t as f64).ln();
            worst_zero = worst_zero.max((log_prob(&src, &tgt, &zero).unwrap() - expect).abs());
        }
    }

    // Enumerated mass, K_t = 3, lengths 1..12, for trained-looking and zero weights.
    let mut monotone = true;
    let mut max_total = 0.0f64;
    let k3 = tiny_config(5, 3, CellKind::Gated);
    let zero = ModelParams::zeros(&k3);
    let models = [
        ModelParams::random(&k3, 0.5, &mut rng).unwrap(),
        ModelParams::random(&k3, 2.0, &mut rng).unwrap(),
        zero.clone(),
    ];
    let mut zero_curve = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let src = random_ids(5, 4, &mut rng);
        let mut total = 0.0;
        let mut prev = 0.0;
        for (l, mass) in mass_by_length(m, &src, 12).into_iter().enumerate() {
            total += mass;
            monotone &= total >= prev;
            max_total = max_total.max(total);
            prev = total;
            if i == 2 {
                zero_curve.push((l + 1, total));
            }
        }
    }
    // Zero weights give a uniform next-token distribution after every
    // prefix, so the length is geometric: mass up to L is 1 - (2/3)^L.
    let geometric = |l: usize| 1.0 - (2.0f64 / 3.0).powi(l as i32);
    let curve_err = zero_curve
        .iter()
        .map(|&(l, m)| (m - geometric(l)).abs())
        .fold(0.0, f64::max);
    let mut prefix_err = 0.0f64;
    for _ in 0..100 {
        let src = random_ids(5, 6, &mut rng);
        let mut s = DecoderSession::new(&src, &zero).unwrap();
        for _ in 0..rng.below(30) {
            s.step().unwrap();
            s.feed(1 + rng.below(2));
        }
        let probs = s.step().unwrap();
        prefix_err = prefix_err.max(probs.iter().map(|q| (q - 1.0 / 3.0).abs()).fold(0.0, f64::max));
    }
    let at30 = geometric(30);

    let ok = worst_row <= 1e-12
        && worst_zero <= 1e-12
        && monotone
        && max_total <= 1.0 + 1e-9
        && curve_err <= 1e-12
        && prefix_err <= 1e-12
        && at30 > 0.99;
    check(
        ok,
        format!(
            "softmax row err {worst_row:.1e}; zero-model score err {worst_zero:.1e}; mass L=1..12 \
             monotone={monotone}, max {max_total:.12}; zero model vs geometric {curve_err:.1e}, \
             uniform after sampled prefixes {prefix_err:.1e}, mass by L=30 {at30:.7}"
        ),
    )
}

fn random_ids(k: usize, max_len: usize, rng: &mut Rng) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..1 + rng.below(max_len)).map(|_| 1 + rng.below(k - 1)).collect();
    ids.push(EOS);
    ids
}

// 3-5. Toy tasks.

const TOY_VOCAB: usize = 20;
const TRAIN_PAIRS: usize = 20_000;
const VALID_PAIRS: usize = 200;
const TEST_PAIRS: usize = 500;
const BUDGET: usize = 20_000;
const EVAL_EVERY: usize = 500;
const SAMPLES: usize = 50;
/// The 0.01 default leaves these small models on a plateau for most of
/// the budget.
const INIT_STD: f64 = 0.1;
/// With zero update-gate biases the gated encoder forgets the first token
/// long before the 50 noise steps are over, and training never leaves
/// chance level. A positive bias starts it near copying its state.
const RECALL_UPDATE_BIAS: f64 = 4.0;

fn toy_spec(task: Task) -> ToySpec {
    ToySpec {
        task,
        vocab_size: TOY_VOCAB,
        min_len: 1,
        max_len: 8,
        noise_len: 50,
    }
}

struct ToyData {
    train: Vec<PhrasePair>,
    valid: Vec<PhrasePair>,
    test: Vec<PhrasePair>,
    vocab: Vocabulary,
}

fn toy_data(task: Task) -> ToyData {
    let spec = toy_spec(task);
    let words: Vec<String> = (0..TOY_VOCAB).map(toytask::word).collect();
    let vocab = Vocabulary::from_words(&words).unwrap();
    let mut rng = Rng::new(11);
    let mut split = |n: usize| -> Vec<PhrasePair> {
        toytask::generate(&spec, n, &mut rng)
            .unwrap()
            .iter()
            .map(|(s, t)| PhrasePair::new(s, t, &vocab, &vocab))
            .collect()
    };
    let train = split(TRAIN_PAIRS);
    let valid = split(VALID_PAIRS);
    let test = split(TEST_PAIRS);
    ToyData {
        train,
        valid,
        test,
        vocab,
    }
}

/// Fraction of pairs whose reference target has probability above 1/2, so
/// that it is certainly the most probable target.
fn majority_rate(p: &ModelParams, pairs: &[PhrasePair]) -> f64 {
    let hits = pairs
        .iter()
        .filter(|q| log_prob(&q.src_ids, &q.tgt_ids, p).unwrap() > 0.5f64.ln())
        .count();
    hits as f64 / pairs.len() as f64
}

struct ToyRun {
    /// Parameters at the best validation check.
    params: ModelParams,
    last: ModelParams,
    best_at: usize,
    best_rate: f64,
    updates: usize,
    seconds: f64,
}

/// Trains for at most `updates` updates, checking the validation majority
/// rate every `EVAL_EVERY` updates. Keeps the best parameters seen and
/// stops as soon as the rate reaches `stop_at`.
fn train_toy(data: &ToyData, cell: CellKind, update_bias: f64, updates: usize, stop_at: f64) -> ToyRun {
    let k = data.vocab.len();
    let cfg = ModelConfig {
        src_vocab: k,
        tgt_vocab: k,
        hidden: 64,
        embed: 16,
        maxout: 32,
        output_rank: 32,
        cell,
        bias: true,
    };
    let mut params = ModelParams::init(&cfg, INIT_STD, &mut Rng::new(1)).unwrap();
    params.set_update_bias(update_bias);
    let train_cfg = TrainConfig {
        max_updates: updates,
        seed: 5,
        log_every: EVAL_EVERY,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let mut best = (majority_rate(&params, &data.valid), 0, params.clone());
    let mut trainer = Trainer::new(params, data.train.clone(), train_cfg).unwrap();
    while trainer.updates() < updates && best.0 < stop_at {
        trainer.step().unwrap();
        if trainer.updates() % EVAL_EVERY == 0 || trainer.updates() == updates {
            let rate = majority_rate(trainer.params(), &data.valid);
            if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
                eprintln!("  {cell:?} update {}: validation {:.3}", trainer.updates(), rate);
            }
            if rate > best.0 {
                best = (rate, trainer.updates(), trainer.params().clone());
            }
        }
    }
    ToyRun {
        params: best.2,
        last: trainer.params().clone(),
        best_at: best.1,
        best_rate: best.0,
        updates: trainer.updates(),
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn describe(run: &ToyRun) -> String {
    format!(
        "{} updates in {:.0}s, kept update {} (validation p(ref) > 1/2 on {:.1}%)",
        run.updates,
        run.seconds,
        run.best_at,
        100.0 * run.best_rate
    )
}

/// Best-of-`SAMPLES` exact-match rate, and the rate at which the best
/// sample starts with the reference's first token.
fn best_of_n(p: &ModelParams, pairs: &[PhrasePair]) -> (f64, f64) {
    let mut rng = Rng::new(17);
    let (mut exact, mut first) = (0, 0);
    for q in pairs {
        let best = &top_samples(p, &q.src_ids, SAMPLES, 1, 20, &mut rng).unwrap()[0];
        exact += (best.tgt_ids == q.tgt_ids) as usize;
        first += (best.tgt_ids[0] == q.tgt_ids[0]) as usize;
    }
    let n = pairs.len() as f64;
    (exact as f64 / n, first as f64 / n)
}

fn copy_task() -> Outcome {
    let data = toy_data(Task::Copy);
    let run = train_toy(&data, CellKind::Gated, 0.0, BUDGET, 1.0);
    let (exact, _) = best_of_n(&run.params, &data.test);
    check(
        exact >= 0.99,
        format!(
            "exact match {:.1}% on {TEST_PAIRS} held-out pairs; {}",
            100.0 * exact,
            describe(&run)
        ),
    )
}

fn order_sensitivity() -> Outcome {
    let data = toy_data(Task::Reverse);
    let run = train_toy(&data, CellKind::Gated, 0.0, BUDGET, 0.995);
    let (exact, _) = best_of_n(&run.params, &data.test);
    let mut rng = Rng::new(23);
    let mut min_dist = f64::INFINITY;
    for _ in 0..100 {
        let a = 2 + rng.below(TOY_VOCAB);
        let b = 2 + (a - 2 + 1 + rng.below(TOY_VOCAB - 1)) % TOY_VOCAB;
        let ab = encode(&[a, b, EOS], &run.params).unwrap().context;
        let ba = encode(&[b, a, EOS], &run.params).unwrap().context;
        let d = ab.iter().zip(&ba).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        min_dist = min_dist.min(d);
    }
    check(
        exact >= 0.95 && min_dist > 1e-6,
        format!(
            "reversal exact match {:.1}% on {TEST_PAIRS} held-out pairs; {}; \
             min ||c(ab) - c(ba)|| = {min_dist:.3e} over 100 pairs",
            100.0 * exact,
            describe(&run)
        ),
    )
}

/// Both cells get the number of updates the gated cell needed and are
/// judged on their final parameters. The tanh cell's best validation
/// checkpoint is reported as well.
fn gating_matters() -> Outcome {
    let data = toy_data(Task::DelayedRecall);
    let gated = train_toy(&data, CellKind::Gated, RECALL_UPDATE_BIAS, BUDGET, 0.995);
    let (_, gated_recall) = best_of_n(&gated.last, &data.test);
    let plain = train_toy(&data, CellKind::Tanh, RECALL_UPDATE_BIAS, gated.updates, 0.995);
    let (_, plain_recall) = best_of_n(&plain.last, &data.test);
    let (_, plain_best) = best_of_n(&plain.params, &data.test);
    check(
        gated_recall >= 0.95 && plain_recall < 0.60,
        format!(
            "first-token recall on {TEST_PAIRS} held-out pairs after {} updates each: gated {:.1}% ({:.0}s), \
             tanh {:.1}% ({:.0}s; {:.1}% at its best validation check, update {})",
            gated.updates,
            100.0 * gated_recall,
            gated.seconds,
            100.0 * plain_recall,
            plain.seconds,
            100.0 * plain_best,
            plain.best_at
        ),
    )
}

// 6. Rescoring pipeline.

fn rescoring_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = Rng::new(6);
    let pick = |rng: &mut Rng, n: usize| -> String {
        (0..1 + rng.below(n))
            .map(|_| {
                // A few words fall outside the vocabulary.
                let i = rng.below(12);
                if i < 10 { format!("t{i}") } else { format!("oov{i}") }
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut table = String::new();
    for i in 0..200 {
        let (s, t) = (pick(&mut rng, 5), pick(&mut rng, 5));
        let line = match i % 4 {
            0 => format!("{s} ||| {t}"),
            1 => format!("{s} ||| {t} ||| 0.25 {:.4}", rng.uniform()),
            2 => format!("{s} ||| {t} ||| 1 ||| 0-0 1-1 ||| 3"),
            _ => format!("{s} ||| {t} ||| "),
        };
        table.push_str(&line);
        table.push('\n');
    }
    let input = dir.path().join("table.txt");
    std::fs::write(&input, &table).map_err(|e| e.to_string())?;
    let words: Vec<String> = (0..8).map(|i| format!("t{i}")).collect();
    let vocab = Vocabulary::from_words(&words).unwrap();
    let cfg = tiny_config(vocab.len(), vocab.len(), CellKind::Gated);
    let trained = ModelParams::random(&cfg, 0.5, &mut rng).unwrap();
    let zero = ModelParams::zeros(&cfg);

    let mut notes = Vec::new();
    let mut ok = true;
    for (name, model) in [("random", &trained), ("zero", &zero)] {
        let output = dir.path().join(format!("{name}.out"));
        rescore_table(model, &vocab, &vocab, &input, &output, &RescoreOptions::default()).map_err(|e| e.to_string())?;
        let out = std::fs::read_to_string(&output).map_err(|e| e.to_string())?;
        let (mut bad_bytes, mut worst, mut worst_closed) = (0, 0.0f64, 0.0f64);
        let lines_in: Vec<&str> = table.lines().collect();
        let lines_out: Vec<&str> = out.lines().collect();
        ok &= lines_in.len() == lines_out.len() && out.ends_with('\n');
        for (a, b) in lines_in.iter().zip(&lines_out) {
            let fa: Vec<&str> = a.split(" ||| ").collect();
            let fb: Vec<&str> = b.split(" ||| ").collect();
            // Remove the one appended feature and compare what is left.
            let (kept, value) = match fb.get(2).and_then(|f| f.rsplit_once(' ')) {
                Some((rest, v)) if fa.len() > 2 && !fa[2].is_empty() => (rest.to_string(), v),
                _ => (String::new(), fb.get(2).copied().unwrap_or("")),
            };
            let mut rebuilt: Vec<&str> = fb.clone();
            if fa.len() > 2 {
                rebuilt[2] = if fa[2].is_empty() { "" } else { &kept };
            } else {
                rebuilt.truncate(2);
            }
            if rebuilt.join(" ||| ") != *a || fb.len() != fa.len().max(3) {
                bad_bytes += 1;
                continue;
            }
            let Ok(value) = value.parse::<f64>() else {
                bad_bytes += 1;
                continue;
            };
            let pair = PhrasePair::new(fa[0].trim(), fa[1].trim(), &vocab, &vocab);
            worst = worst.max((value - score_pair(model, &pair).unwrap()).abs());
            if name == "zero" {
                let t = fa[1].split_whitespace().count() + 1;
                let closed = t as f64 * (1.0 / vocab.len() as f64).ln();
                worst_closed = worst_closed.max((value - closed).abs());
            }
        }
        ok &= bad_bytes == 0 && worst <= 1e-6 && worst_closed <= 1e-6;
        notes.push(format!(
            "{name} model: {} lines, {bad_bytes} altered, max |feature - score_pair| {worst:.1e}{}",
            lines_out.len(),
            if name == "zero" { format!(", vs closed form {worst_closed:.1e}") } else { String::new() }
        ));
    }
    check(ok, notes.join("; "))
}

// 7. Determinism.

fn cli(args: &[&str]) -> Result<String, String> {
    let mut out = Vec::new();
    let mut full = vec!["encdec"];
    full.extend_from_slice(args);
    encdec_cli::run_with(full, &mut out).map_err(|e| e.to_string())?;
    Ok(String::from_utf8(out).unwrap())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let conf = repo_root().join("configs/tiny.conf").to_string_lossy().into_owned();
    cli(&["gen-toytask", "--task", "reverse", "--pairs", "300", "--seed", "3", "--output", &p("data.txt")])?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        cli(&[
            "train", "--config", &conf, "--train-data", &p("data.txt"), "--checkpoint", &p(run),
            "--max-updates", "60", "--set", "log_every=10", "--set", "batch_size=8", "--seed", "9",
        ])?;
        let log = std::fs::read_to_string(p(&format!("{run}.log"))).map_err(|e| e.to_string())?;
        // Drop the wall-clock column.
        logs.push(log.lines().map(|l| l.rsplit_once('\t').map_or(l, |x| x.0).to_string()).collect::<Vec<_>>());
    }
    let read = |name: &str| std::fs::read(p(name)).unwrap();
    let same_ckpt = read("a") == read("b");
    let same_log = logs[0] == logs[1];

    let params = checkpoint::load(Path::new(&p("a"))).map_err(|e| e.to_string())?;
    checkpoint::save(&params, Path::new(&p("copy"))).map_err(|e| e.to_string())?;
    let reloaded = checkpoint::load(Path::new(&p("copy"))).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(4);
    let mut bit_exact = read("a") == read("copy");
    for _ in 0..100 {
        let src = random_ids(params.config.src_vocab, 6, &mut rng);
        let tgt = random_ids(params.config.tgt_vocab, 6, &mut rng);
        let a = log_prob(&src, &tgt, &params).unwrap();
        let b = log_prob(&src, &tgt, &reloaded).unwrap();
        bit_exact &= a.to_bits() == b.to_bits();
    }
    check(
        same_ckpt && same_log && bit_exact,
        format!(
            "checkpoints identical: {same_ckpt}; loss logs identical: {same_log}; \
             log_prob bit-exact after round trip (100 pairs): {bit_exact}"
        ),
    )
}

// 8. Sampling calibration.

/// Complete targets whose probability is at least `floor`, found by
/// walking the prefix tree.
fn enumerate_targets(s: &DecoderSession<'_>, floor: f64) -> Vec<(Vec<TokenId>, f64)> {
    fn walk(s: &DecoderSession<'_>, prefix: &mut Vec<TokenId>, pp: f64, floor: f64, out: &mut Vec<(Vec<TokenId>, f64)>) {
        let mut s = s.clone();
        let probs = s.step().unwrap();
        for (y, &py) in probs.iter().enumerate() {
            let q = pp * py;
            if q < floor {
                continue;
            }
            prefix.push(y);
            if y == EOS {
                out.push((prefix.clone(), q));
            } else {
                let mut next = s.clone();
                next.feed(y);
                walk(&next, prefix, q, floor, out);
            }
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    walk(s, &mut Vec::new(), 1.0, floor, &mut out);
    out
}

fn sampling_calibration() -> Outcome {
    // K_t = 3: EOS, UNK and one word.
    let v_src = build_vocab(["a b"], 2).unwrap();
    let v_tgt = build_vocab(["x"], 1).unwrap();
    let pool: Vec<PhrasePair> = [("a", "x"), ("b", "x x"), ("a b", "x x x"), ("b a", "")]
        .iter()
        .map(|(s, t)| PhrasePair::new(s, t, &v_src, &v_tgt))
        .collect();
    let cfg = tiny_config(v_src.len(), v_tgt.len(), CellKind::Gated);
    let params = ModelParams::init(&cfg, 0.1, &mut Rng::new(8)).unwrap();
    let train_cfg = TrainConfig {
        max_updates: 300,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(params, pool, train_cfg).unwrap();
    for _ in 0..300 {
        trainer.step().unwrap();
    }
    let params = trainer.into_params();

    let src = rnn_encdec::data::encode_phrase("a b", &v_src);
    let session = DecoderSession::new(&src, &params).unwrap();
    let targets = enumerate_targets(&session, 1e-9);
    let enumerated: f64 = targets.iter().map(|t| t.1).sum();

    const N: usize = 1_000_000;
    let mut counts: HashMap<Vec<TokenId>, usize> = HashMap::new();
    let mut rng = Rng::new(99);
    for _ in 0..N {
        let s = sample_from(&session, 200, &mut rng).unwrap();
        *counts.entry(s.tgt_ids).or_default() += 1;
    }
    let n = N as f64;
    let (mut within_mass, mut outside, mut worst_z) = (0.0, 0, 0.0f64);
    for (ids, p) in &targets {
        let c = counts.get(ids).copied().unwrap_or(0) as f64;
        let z = (c - n * p).abs() / (n * p * (1.0 - p)).sqrt();
        if z <= 3.0 {
            within_mass += p;
        } else {
            outside += 1;
        }
        if n * p >= 1.0 {
            worst_z = worst_z.max(z);
        }
    }
    check(
        within_mass >= 0.99,
        format!(
            "{} targets enumerated (mass {enumerated:.9}); mass within 3 sigma over {N} samples {within_mass:.6}; \
             {outside} outside; largest |z| among expected-count >= 1 targets {worst_z:.2}",
            targets.len()
        ),
    )
}

const CRITERIA: &[(u32, &str, fn() -> Outcome)] = &[
    (1, "gradient fidelity", gradient_fidelity),
    (2, "distribution sanity", distribution_sanity),
    (3, "copy task", copy_task),
    (4, "order sensitivity", order_sensitivity),
    (5, "gating matters", gating_matters),
    (6, "rescoring pipeline", rescoring_pipeline),
    (7, "determinism", determinism),
    (8, "sampling calibration", sampling_calibration),
];

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("ACCEPTANCE")
        .ok()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for &(id, name, run) in CRITERIA {
        if selected.as_ref().is_some_and(|s| !s.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {id} ({name}, {secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}, {secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
