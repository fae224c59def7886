use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rnn_encdec::checkpoint;
use rnn_encdec::data::{build_vocab, dedup_pairs, read_pairs, PhrasePair, TokenId, Vocabulary, EOS};
use rnn_encdec::infer::{
    format_score, rescore_table, score_pair, top_samples, write_phrase_vectors, write_word_embeddings,
    RescoreOptions, Side, UnkSide,
};
use rnn_encdec::model::ModelParams;
use rnn_encdec::optim::{grad_check_with, Stencil, Trainer};
use rnn_encdec::rng::Rng;

use crate::toytask::{self, Task, ToySpec};
use crate::{CliError, Command, RunConfig};

pub fn dispatch(cmd: &Command, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Train { .. } => cmd_train(cfg),
        Command::Score { .. } => cmd_score(cfg, stdout),
        Command::Sample { .. } => cmd_sample(cfg, stdout),
        Command::Rescore { .. } => cmd_rescore(cfg),
        Command::ExportWords { .. } => cmd_export_words(cfg, stdout),
        Command::ExportPhrases { .. } => cmd_export_phrases(cfg, stdout),
        Command::GradCheck { .. } => cmd_gradcheck(cfg, stdout),
        Command::GenToytask { .. } => cmd_gen_toytask(cfg, stdout),
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn sidecar(ckpt: &Path, suffix: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn src_vocab_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, ".src.vocab")
}

pub fn tgt_vocab_path(ckpt: &Path) -> PathBuf {
    sidecar(ckpt, ".tgt.vocab")
}

/// Exclusive claim on a checkpoint path, released on drop.
pub struct CheckpointLock {
    path: PathBuf,
}

impl CheckpointLock {
    pub fn acquire(ckpt: &Path) -> Result<Self, CliError> {
        let path = sidecar(ckpt, ".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Data(format!(
                "{} exists; another run is writing this checkpoint",
                path.display()
            ))),
            Err(e) => Err(io_err(&path, e)),
        }
    }
}

impl Drop for CheckpointLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Output file when `output` is set, otherwise `stdout`.
fn with_output(
    cfg: &RunConfig,
    stdout: &mut dyn Write,
    body: impl FnOnce(&mut dyn Write) -> Result<(), CliError>,
) -> Result<(), CliError> {
    match cfg.path("output") {
        Some(path) => {
            let mut buf = Vec::new();
            body(&mut buf)?;
            fs::write(&path, buf).map_err(|e| io_err(&path, e))
        }
        None => body(stdout),
    }
}

fn write_err(e: io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let data = cfg.require_path("train_data")?;
    let ckpt = cfg.require_path("checkpoint")?;
    let raw = read_pairs(&data)?;
    if raw.is_empty() {
        return Err(CliError::Data(format!("{} holds no pairs", data.display())));
    }
    let v_src = build_vocab(raw.iter().map(|r| r.0.as_str()), cfg.get("src_shortlist")?)?;
    let v_tgt = build_vocab(raw.iter().map(|r| r.1.as_str()), cfg.get("tgt_shortlist")?)?;
    let mut pairs: Vec<PhrasePair> = raw
        .iter()
        .map(|(s, t, _)| PhrasePair::new(s, t, &v_src, &v_tgt))
        .collect();
    if cfg.get::<bool>("dedup")? {
        pairs = dedup_pairs(pairs);
    }
    info!(
        "{} training pairs, vocabularies {} / {}",
        pairs.len(),
        v_src.len(),
        v_tgt.len()
    );

    let model_cfg = cfg.model_config(v_src.len(), v_tgt.len())?;
    let train_cfg = cfg.train_config()?;
    let mut params = ModelParams::init(&model_cfg, cfg.get("init_std")?, &mut Rng::new(train_cfg.seed))?;
    params.set_update_bias(cfg.get("update_bias")?);
    let log_path = cfg.path("log").unwrap_or_else(|| sidecar(&ckpt, ".log"));

    let _lock = CheckpointLock::acquire(&ckpt)?;
    v_src.save(&src_vocab_path(&ckpt))?;
    v_tgt.save(&tgt_vocab_path(&ckpt))?;
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "# update\tmean_nll\tseconds").map_err(write_err)?;

    let max_updates = train_cfg.max_updates;
    let every = train_cfg.checkpoint_every;
    let mut trainer = Trainer::new(params, pairs, train_cfg)?;
    for _ in 0..max_updates {
        if let Some(line) = trainer.step()? {
            info!("update {line}");
            writeln!(log, "{line}").map_err(write_err)?;
        }
        if every > 0 && trainer.updates() % every == 0 && trainer.updates() < max_updates {
            checkpoint::save(trainer.params(), &ckpt)?;
        }
    }
    checkpoint::save(trainer.params(), &ckpt)?;
    info!("wrote {}", ckpt.display());
    Ok(())
}

/// Shape keys that, when given explicitly, must agree with a checkpoint.
const SHAPE_KEYS: &[&str] = &["hidden", "embed", "maxout", "output_rank", "cell", "bias"];

pub struct LoadedModel {
    pub params: ModelParams,
    pub v_src: Vocabulary,
    pub v_tgt: Vocabulary,
}

pub fn load_model(cfg: &RunConfig) -> Result<LoadedModel, CliError> {
    let ckpt = cfg.require_path("checkpoint")?;
    let params = checkpoint::load(&ckpt)?;
    let v_src = Vocabulary::load(&src_vocab_path(&ckpt))?;
    let v_tgt = Vocabulary::load(&tgt_vocab_path(&ckpt))?;
    let c = &params.config;
    if v_src.len() != c.src_vocab || v_tgt.len() != c.tgt_vocab {
        return Err(CliError::Data(format!(
            "vocabulary files hold {} / {} tokens but the checkpoint expects {} / {}",
            v_src.len(),
            v_tgt.len(),
            c.src_vocab,
            c.tgt_vocab
        )));
    }
    let actual = [
        c.hidden.to_string(),
        c.embed.to_string(),
        c.maxout.to_string(),
        c.output_rank.to_string(),
        c.cell.as_str().to_string(),
        c.bias.to_string(),
    ];
    for (key, have) in SHAPE_KEYS.iter().zip(actual) {
        if cfg.is_explicit(key) && cfg.raw(key) != have {
            let same_cell = *key == "cell"
                && cfg.get::<rnn_encdec::CellKind>("cell").ok() == Some(c.cell);
            if !same_cell {
                return Err(CliError::Data(format!(
                    "config sets {key} = {} but the checkpoint has {have}",
                    cfg.raw(key)
                )));
            }
        }
    }
    Ok(LoadedModel { params, v_src, v_tgt })
}

fn read_input(cfg: &RunConfig) -> Result<String, CliError> {
    let path = cfg.require_path("input")?;
    fs::read_to_string(&path).map_err(|e| io_err(&path, e))
}

pub fn cmd_score(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let input = cfg.require_path("input")?;
    let raw = read_pairs(&input)?;
    with_output(cfg, stdout, |out| {
        for (s, t, _) in &raw {
            let pair = PhrasePair::new(s, t, &m.v_src, &m.v_tgt);
            let score = score_pair(&m.params, &pair)?;
            writeln!(out, "{}\t{s}\t{t}", format_score(score)).map_err(write_err)?;
        }
        Ok(())
    })
}

pub fn cmd_sample(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let text = read_input(cfg)?;
    let n: usize = cfg.get("samples")?;
    let k: usize = cfg.get("top")?;
    let max_len: usize = cfg.get("max_len")?;
    let mut rng = Rng::new(cfg.get("seed")?);
    with_output(cfg, stdout, |out| {
        for line in text.lines() {
            let src = line.trim();
            let ids = rnn_encdec::data::encode_phrase(src, &m.v_src);
            for (rank, s) in top_samples(&m.params, &ids, n, k.min(n), max_len, &mut rng)?
                .iter()
                .enumerate()
            {
                writeln!(
                    out,
                    "{src}\t{}\t{}\t{}\t{}{}",
                    rank + 1,
                    format_score(s.score),
                    s.count,
                    s.text(&m.v_tgt),
                    if s.truncated { "\t(truncated)" } else { "" }
                )
                .map_err(write_err)?;
            }
        }
        Ok(())
    })
}

pub fn cmd_rescore(cfg: &RunConfig) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let input = cfg.require_path("input")?;
    let output = cfg.require_path("output")?;
    let unk_feature = match cfg.raw("unk_feature") {
        "none" | "off" => None,
        other => Some(other.parse::<UnkSide>()?),
    };
    let opts = RescoreOptions {
        header: cfg.get("header")?,
        unk_feature,
    };
    let summary = rescore_table(&m.params, &m.v_src, &m.v_tgt, &input, &output, &opts)?;
    info!(
        "rescored {} of {} lines into {}",
        summary.scored,
        summary.lines,
        output.display()
    );
    Ok(())
}

pub fn cmd_export_words(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let side: Side = cfg.raw("side").parse()?;
    let v = match side {
        Side::Source => &m.v_src,
        Side::Target => &m.v_tgt,
    };
    with_output(cfg, stdout, |out| Ok(write_word_embeddings(&m.params, v, side, out)?))
}

pub fn cmd_export_phrases(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let m = load_model(cfg)?;
    let text = read_input(cfg)?;
    let phrases: Vec<&str> = text.lines().map(str::trim).collect();
    with_output(cfg, stdout, |out| {
        Ok(write_phrase_vectors(&m.params, &phrases, &m.v_src, out)?)
    })
}

/// Random EOS-terminated sequences of total length 1..=max_len.
fn random_ids(vocab: usize, max_len: usize, rng: &mut Rng) -> Vec<TokenId> {
    let len = 1 + rng.below(max_len);
    let mut ids: Vec<TokenId> = (1..len).map(|_| 1 + rng.below(vocab - 1)).collect();
    ids.push(EOS);
    ids
}

pub fn cmd_gradcheck(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let k_s = cfg.get::<usize>("src_shortlist")? + 2;
    let k_t = cfg.get::<usize>("tgt_shortlist")? + 2;
    let model_cfg = cfg.model_config(k_s, k_t)?;
    let mut rng = Rng::new(cfg.get("seed")?);
    let params = ModelParams::random(&model_cfg, cfg.get("check_std")?, &mut rng)?;
    let max_len: usize = cfg.get("check_max_len")?;
    if max_len == 0 {
        return Err(CliError::Usage("check_max_len must be at least 1".into()));
    }
    let step: f64 = cfg.get("check_step")?;
    let tol: f64 = cfg.get("check_tol")?;
    let stencil: Stencil = cfg.raw("check_stencil").parse()?;
    let mut worst = (0.0f64, String::new());
    let (mut entries, mut kinks) = (0, 0);
    for _ in 0..cfg.get::<usize>("check_pairs")? {
        let pair = PhrasePair::from_ids(random_ids(k_s, max_len, &mut rng), random_ids(k_t, max_len, &mut rng));
        let report = grad_check_with(&params, &pair, step, stencil)?;
        entries += report.entries;
        kinks += report.kinks;
        if report.max_rel_error >= worst.0 {
            worst = (report.max_rel_error, report.worst_block);
        }
    }
    writeln!(
        stdout,
        "max_rel_error\t{:.3e}\tworst_block\t{}\tentries\t{entries}\tskipped_at_kinks\t{kinks}",
        worst.0, worst.1
    )
    .map_err(write_err)?;
    if worst.0 < tol {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {tol:e}",
            worst.0
        )))
    }
}

pub fn toy_spec(cfg: &RunConfig) -> Result<ToySpec, CliError> {
    let task: Task = cfg.raw("task").parse().map_err(CliError::Usage)?;
    let spec = ToySpec {
        task,
        vocab_size: cfg.get("vocab_size")?,
        min_len: cfg.get("min_len")?,
        max_len: cfg.get("max_src_len")?,
        noise_len: cfg.get("noise_len")?,
    };
    spec.validate().map_err(CliError::Usage)?;
    Ok(spec)
}

pub fn cmd_gen_toytask(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let spec = toy_spec(cfg)?;
    let n: usize = cfg.get("pairs")?;
    if n == 0 {
        warn!("pairs = 0; writing an empty corpus");
    }
    let pairs = toytask::generate(&spec, n, &mut Rng::new(cfg.get("seed")?)).map_err(CliError::Usage)?;
    let text = toytask::to_bitext(&pairs);
    with_output(cfg, stdout, |out| out.write_all(text.as_bytes()).map_err(write_err))
}
