mod manifest;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{error::ErrorKind, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use irnn::corpus::column::format_columns;
use irnn::corpus::synth::{generate_synthetic_corpus, Grammar, SplitSizes};
use irnn::corpus::vocab::{Section, BOS};
use irnn::corpus::{decode_labels, encode_all, load_column_file, ChunkScheme, LabelPolicy, RawSentence, Vocabulary};
use irnn::eval::evaluate;
use irnn::math::rng_from_seed;
use irnn::model::{load_model, save_model, tag_bidirectional, Direction, ModelParams, TaggerOutput, Variant};
use irnn::pretrain::{load_external_embeddings, train_nnlm, write_embeddings};
use irnn::train::{format_log, tag_all, train_bidirectional, train_from, LabeledSet, TrainConfig};

use manifest::{resolve_config, RunManifest};

#[derive(Parser)]
#[command(name = "irnn", version, about = "Label-embedding recurrent taggers for slot filling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/dev/test files of a synthetic slot-filling corpus.
    Generate(GenerateArgs),
    /// Pretrain word or label embeddings with a feed-forward language model.
    Pretrain(PretrainArgs),
    /// Train a forward, backward or bidirectional tagger.
    Train(TrainArgs),
    /// Tag a column file with one model, or two for bidirectional decoding.
    Tag(TagArgs),
    /// Score predicted labels against gold labels.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Training sentences; dev and test get a tenth each.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    size: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Template grammar file; the built-in flight grammar when absent.
    #[arg(long)]
    grammar: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value file; falls back to $IRNN_CONFIG.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["media-like", "atis-like"])]
    preset: Option<String>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        resolve_config(self.preset.as_deref(), self.config.as_deref(), &self.sets, self.seed)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Words,
    Labels,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, value_enum)]
    target: Target,
    /// Defaults to the config's epochs_nnlm_word or epochs_nnlm_label.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    Fwd,
    Bwd,
    Bidir,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "irnn", value_parser = ["irnn", "irnn-gru", "irnn-deep"])]
    variant: String,
    #[arg(long, value_enum, default_value = "fwd")]
    direction: DirectionArg,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    word_emb: Option<PathBuf>,
    #[arg(long)]
    label_emb: Option<PathBuf>,
    /// Trained forward model (bidir only).
    #[arg(long)]
    fwd_model: Option<PathBuf>,
    /// Trained backward model (bidir only).
    #[arg(long)]
    bwd_model: Option<PathBuf>,
    /// Model path; the vocabulary, log and manifest are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct TagArgs {
    /// One model, or a forward and a backward model.
    #[arg(long = "model", required = true, num_args = 1, action = clap::ArgAction::Append)]
    models: Vec<PathBuf>,
    /// Vocabulary file; defaults to `<first model>.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value = "suffix", value_parser = ["suffix", "prefix", "plain"])]
    scheme: String,
    /// Also write the report as key=value lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_corpus(path: &Path) -> Result<Vec<RawSentence>> {
    let s = load_column_file(path).with_context(|| format!("cannot load corpus {}", path.display()))?;
    if s.is_empty() {
        bail!("{} holds no sentences", path.display());
    }
    Ok(s)
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let grammar = match &a.grammar {
        Some(p) => Grammar::load(p).with_context(|| format!("cannot load grammar {}", p.display()))?,
        None => Grammar::builtin(),
    };
    let sizes = SplitSizes::from_train(a.size as usize);
    let corpus = generate_synthetic_corpus(&grammar, sizes, &mut rng_from_seed(a.seed))?;
    corpus.write_to(&a.out_dir)?;
    eprintln!(
        "wrote {} / {} / {} sentences to {}",
        sizes.train,
        sizes.dev,
        sizes.test,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    let raw = load_corpus(&a.train)?;
    let labels = matches!(a.target, Target::Labels);
    if let Some(e) = a.epochs {
        if labels {
            cfg.epochs_nnlm_label = e;
        } else {
            cfg.epochs_nnlm_word = e;
        }
    }
    let (vocab, _) = Vocabulary::build(&raw, cfg.vocab_options())?;
    let seqs = encode_all(&raw, &vocab, LabelPolicy::Strict)?;
    let (streams, section, pad): (Vec<Vec<usize>>, _, _) = if labels {
        (seqs.into_iter().map(|s| s.labels).collect(), &vocab.labels, vocab.bol())
    } else {
        (seqs.into_iter().map(|s| s.words).collect(), &vocab.words, BOS)
    };
    let nnlm = cfg.nnlm_config(labels);
    let run = train_nnlm(&streams, section.len(), pad, &nnlm, &mut rng_from_seed(cfg.seed))?;
    write_embeddings(&a.out, section, &run.params.emb)?;
    eprintln!(
        "{} epochs, loss {:.4} -> {:.4}, {} embeddings written to {}",
        nnlm.epochs,
        run.initial_loss,
        run.epoch_losses.last().copied().unwrap_or(run.initial_loss),
        section.len(),
        a.out.display()
    );
    Ok(())
}

fn usage_error(msg: &str) -> ! {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).exit()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.direction == DirectionArg::Bidir && (a.fwd_model.is_none() || a.bwd_model.is_none()) {
        usage_error("--direction bidir requires --fwd-model and --bwd-model");
    }
    let cfg = a.config.resolve()?;
    let variant: Variant = a.variant.parse()?;
    let mut manifest = RunManifest::new("train", &cfg);
    manifest.setting("variant", &a.variant);
    manifest.setting("direction", a.direction.to_possible_value().expect("no skipped values").get_name());
    manifest.input("train", &a.train)?;
    manifest.input("dev", &a.dev)?;
    for (role, p) in [
        ("word_emb", &a.word_emb),
        ("label_emb", &a.label_emb),
        ("fwd_model", &a.fwd_model),
        ("bwd_model", &a.bwd_model),
    ] {
        if let Some(p) = p {
            manifest.input(role, p)?;
        }
    }
    let raw_train = load_corpus(&a.train)?;
    let raw_dev = load_corpus(&a.dev)?;
    let manifest_path = with_suffix(&a.out, ".manifest");
    manifest.write(&manifest_path)?;

    let (log, best) = match a.direction {
        DirectionArg::Bidir => {
            let (fp, bp) = (a.fwd_model.as_ref().expect("checked"), a.bwd_model.as_ref().expect("checked"));
            let vocab = Vocabulary::load(with_suffix(fp, ".vocab")).context("cannot load the forward model's vocabulary")?;
            let fwd = load_model(fp, Some(&vocab)).with_context(|| format!("cannot load {}", fp.display()))?;
            let bwd = load_model(bp, Some(&vocab)).with_context(|| format!("cannot load {}", bp.display()))?;
            let train = LabeledSet::encode(&raw_train, &vocab, LabelPolicy::Strict)?;
            let dev = LabeledSet::encode(&raw_dev, &vocab, LabelPolicy::Lenient)?;
            let run = train_bidirectional(&fwd, &bwd, &vocab, &train, &dev, &cfg)?;
            for (suffix, model) in [(".fwd", &run.fwd), (".bwd", &run.bwd)] {
                let p = with_suffix(&a.out, suffix);
                save_model(model, &p)?;
                vocab.save(with_suffix(&p, ".vocab"))?;
            }
            (run.log, run.best)
        }
        dir => {
            let direction = if dir == DirectionArg::Fwd { Direction::Forward } else { Direction::Backward };
            let (vocab, stats) = Vocabulary::build(&raw_train, cfg.vocab_options())?;
            let train = LabeledSet::encode(&raw_train, &vocab, LabelPolicy::Strict)?;
            let dev = LabeledSet::encode(&raw_dev, &vocab, LabelPolicy::Lenient)?;
            let mut rng = rng_from_seed(cfg.seed);
            let mut model = ModelParams::new(cfg.model_spec(&vocab, variant, direction)?, vocab.hash(), &mut rng)?;
            if let Some(p) = &a.word_emb {
                install(&mut model, "emb.word", p, &vocab.words, |t| vocab.normalize_word(t))?;
            }
            if let Some(p) = &a.label_emb {
                install(&mut model, "emb.label", p, &vocab.labels, str::to_string)?;
            }
            eprintln!(
                "{} sentences, {} word types ({} kept), {} labels, {} parameters",
                train.len(),
                stats.word_types,
                stats.kept_word_types,
                vocab.num_labels(),
                model.num_parameters()
            );
            let run = train_from(model, &vocab, &train, &dev, &cfg, &mut rng)?;
            save_model(&run.model, &a.out)?;
            vocab.save(with_suffix(&a.out, ".vocab"))?;
            (run.log, run.best)
        }
    };
    fs::write(with_suffix(&a.out, ".log"), format_log(&log))?;
    let b = &log[best];
    eprintln!(
        "kept epoch {} (dev accuracy {:.2}, F1 {:.2}); manifest {}",
        b.epoch,
        b.dev.accuracy,
        b.dev.f1,
        manifest_path.display()
    );
    Ok(())
}

fn install(
    model: &mut ModelParams,
    name: &str,
    path: &Path,
    tokens: &Section,
    normalize: impl Fn(&str) -> String,
) -> Result<()> {
    let base = model.tensor(name).expect("every variant has word and label tables");
    let (table, copied) =
        load_external_embeddings(path, tokens, base, normalize).with_context(|| format!("cannot load embeddings {}", path.display()))?;
    *model.tensor_mut(name).expect("present") = table;
    eprintln!("{name}: {copied} of {} rows from {}", tokens.len(), path.display());
    Ok(())
}

fn cmd_tag(a: &TagArgs) -> Result<()> {
    if a.models.len() > 2 {
        usage_error("--model takes one model, or a forward and a backward model");
    }
    let vocab_path = a.vocab.clone().unwrap_or_else(|| with_suffix(&a.models[0], ".vocab"));
    let vocab = Vocabulary::load(&vocab_path).with_context(|| format!("cannot load vocabulary {}", vocab_path.display()))?;
    let models = a
        .models
        .iter()
        .map(|p| load_model(p, Some(&vocab)).with_context(|| format!("cannot load {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let raw = load_corpus(&a.input)?;
    let seqs = encode_all(&raw, &vocab, LabelPolicy::Lenient)?;
    let outputs: Vec<TaggerOutput> = match models.as_slice() {
        [m] => tag_all(m, &seqs)?,
        [x, y] => {
            let (fwd, bwd) = match (x.spec.direction, y.spec.direction) {
                (Direction::Forward, Direction::Backward) => (x, y),
                (Direction::Backward, Direction::Forward) => (y, x),
                _ => bail!("bidirectional tagging needs one forward and one backward model"),
            };
            irnn::par::map(&seqs, |s| tag_bidirectional(fwd, bwd, s)).into_iter().collect::<irnn::Result<_>>()?
        }
        _ => unreachable!("one or two models"),
    };
    let tagged: Vec<RawSentence> = raw
        .into_iter()
        .zip(&outputs)
        .map(|(mut s, out)| {
            s.labels = decode_labels(&out.labels, &vocab);
            s
        })
        .collect();
    write_out(a.output.as_deref(), &format_columns(&tagged))
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scheme: ChunkScheme = a.scheme.parse()?;
    let gold = load_corpus(&a.gold)?;
    let pred = load_corpus(&a.pred)?;
    if gold.len() != pred.len() {
        bail!(irnn::Error::Data(format!(
            "{} has {} sentences but {} has {}",
            a.gold.display(),
            gold.len(),
            a.pred.display(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(&pred).enumerate() {
        if g.words != p.words {
            bail!(irnn::Error::Data(format!("sentence {} has different words in the two files", i + 1)));
        }
    }
    let g: Vec<Vec<String>> = gold.into_iter().map(|s| s.labels).collect();
    let p: Vec<Vec<String>> = pred.into_iter().map(|s| s.labels).collect();
    let report = evaluate(&g, &p, scheme)?;
    if let Some(out) = &a.out {
        report.write_key_values(out)?;
    }
    write_out(None, &report.to_text())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Train(a) => cmd_train(a),
        Command::Tag(a) => cmd_tag(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
