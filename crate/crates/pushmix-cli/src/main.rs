//! `pushmix` - complementary-product push recommendation toolkit.

mod cmd;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "pushmix",
    about = "Complementary-product push recommendation: graph scoring, mixture-model training, ranking and offline evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Level {
    Product,
    Category,
}

#[derive(Subcommand)]
enum Command {
    /// Validate event and impression logs and print counts.
    Ingest {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        impressions: PathBuf,
        /// Fail on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Compute co-purchase/substitutivity/complementarity scores as CSV.
    Score {
        #[arg(long)]
        events: PathBuf,
        #[arg(long, value_enum, default_value = "product")]
        level: Level,
        #[arg(long)]
        out: PathBuf,
        /// Keep only rows with s >= this value.
        #[arg(long)]
        min_s: Option<f64>,
        /// Keep only rows with q <= this value.
        #[arg(long)]
        max_q: Option<f64>,
        /// Restrict events to timestamps >= this (epoch seconds).
        #[arg(long)]
        window_start: Option<i64>,
        /// Restrict events to timestamps < this (epoch seconds).
        #[arg(long)]
        window_end: Option<i64>,
    },
    /// Write the stock feature schema as JSON.
    Schema {
        /// Number of user-cluster one-hot slots.
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assemble impressions into JSON-lines examples.
    Featurize {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        impressions: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Reference time (epoch seconds); sources use events before it.
        #[arg(long)]
        ref_time: i64,
        #[arg(long)]
        out: PathBuf,
        /// Optional price catalog (JSON-lines {item_id, price}).
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Optional demographics (JSON-lines {user_id, age_bucket, income_bucket}).
        #[arg(long)]
        users: Option<PathBuf>,
    },
    /// Fit the mixture model with EM.
    Train {
        #[arg(long)]
        examples: PathBuf,
        /// Number of latent contexts M.
        #[arg(long)]
        contexts: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        l2: f64,
        /// Schema file; embeds its hash in the model and checks dimensions.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score examples with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank complement candidates for (user, anchor) pairs.
    Rank {
        #[arg(long)]
        model: PathBuf,
        /// Product-level score CSV from `pushmix score`.
        #[arg(long)]
        scores: PathBuf,
        /// Category-level score CSV; computed from events when omitted.
        #[arg(long)]
        category_scores: Option<PathBuf>,
        /// JSON-lines of {user_id, anchor_item_id}.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        ref_time: i64,
        #[arg(long, default_value_t = 1)]
        top_n: usize,
        #[arg(long)]
        max_per_user: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        min_s: f64,
        #[arg(long, default_value_t = 0.1)]
        max_q: f64,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic world with planted ground truth.
    Synth {
        /// SyntheticSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Offline studies on synthetic data.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Context-count sweep with assignment-feature ablations.
    Curve {
        #[arg(long)]
        examples: PathBuf,
        /// Schema file enabling the user-only/product-only ablations.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        kmax: usize,
        #[arg(long, default_value_t = 0.2)]
        valid_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        restarts: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Policy comparison against planted ground truth.
    Policies {
        /// SyntheticSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        sends: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Context count of the larger mixture policy; defaults to the
        /// spec's true context count.
        #[arg(long)]
        k_hat: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest {
            events,
            impressions,
            strict,
        } => cmd::ingest(&events, &impressions, strict),
        Command::Score {
            events,
            level,
            out,
            min_s,
            max_q,
            window_start,
            window_end,
        } => cmd::score(
            &events,
            matches!(level, Level::Category),
            &out,
            min_s,
            max_q,
            window_start,
            window_end,
        ),
        Command::Schema { clusters, out } => cmd::schema(clusters, &out),
        Command::Featurize {
            events,
            impressions,
            schema,
            ref_time,
            out,
            catalog,
            users,
        } => cmd::featurize(
            &events,
            &impressions,
            &schema,
            ref_time,
            &out,
            catalog.as_deref(),
            users.as_deref(),
        ),
        Command::Train {
            examples,
            contexts,
            tol,
            max_iter,
            restarts,
            seed,
            l2,
            schema,
            out,
        } => cmd::train(
            &examples,
            contexts,
            tol,
            max_iter,
            restarts,
            seed,
            l2,
            schema.as_deref(),
            &out,
        ),
        Command::Predict {
            model,
            examples,
            out,
        } => cmd::predict(&model, &examples, &out),
        Command::Rank {
            model,
            scores,
            category_scores,
            pairs,
            events,
            schema,
            ref_time,
            top_n,
            max_per_user,
            min_s,
            max_q,
            catalog,
            users,
            out,
        } => cmd::rank(cmd::RankArgs {
            model: &model,
            scores: &scores,
            category_scores: category_scores.as_deref(),
            pairs: &pairs,
            events: &events,
            schema: &schema,
            ref_time,
            top_n,
            max_per_user,
            min_s,
            max_q,
            catalog: catalog.as_deref(),
            users: users.as_deref(),
            out: &out,
        }),
        Command::Synth { spec, out_dir } => cmd::synth(spec.as_deref(), &out_dir),
        Command::Eval(EvalCommand::Curve {
            examples,
            schema,
            kmax,
            valid_frac,
            seed,
            restarts,
            out,
        }) => cmd::eval_curve(
            &examples,
            schema.as_deref(),
            kmax,
            valid_frac,
            seed,
            restarts,
            &out,
        ),
        Command::Eval(EvalCommand::Policies {
            spec,
            sends,
            seed,
            k_hat,
            out,
        }) => cmd::eval_policies(spec.as_deref(), sends, seed, k_hat, &out),
    }
}
