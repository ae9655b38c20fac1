use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use infometic_core::dataset::read_jsonl;
use infometic_core::encoding::PosSet;
use infometic_core::evalharness::{
    run_benchmark, run_captoken_benchmark, BenchmarkReport, CapTokenGold, JudgmentLine, ScoreLine,
    Statistic,
};
use infometic_core::ScoreReport;
use serde::{Deserialize, Serialize};

use crate::config::{emit, log_config, overlay_fields, GlobalArgs};
use crate::failure::{Context, Failure};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    KendallB,
    KendallC,
    Pearson,
    PascalAccuracy,
}

impl From<Stat> for Statistic {
    fn from(s: Stat) -> Self {
        match s {
            Stat::KendallB => Statistic::KendallB,
            Stat::KendallC => Statistic::KendallC,
            Stat::Pearson => Statistic::Pearson,
            Stat::PascalAccuracy => Statistic::PascalAccuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    #[default]
    Overall,
    Precision,
    Recall,
    Plus,
}

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchArgs {
    /// Metric scores: ScoreReport lines from `score`, or {image_id, caption_idx, score} lines.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Human judgment JSONL.
    #[arg(long)]
    pub judgments: Option<PathBuf>,
    /// Token-level gold annotations JSONL.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Statistics over the judgments [default: kendall-b,kendall-c].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub stats: Option<Vec<Stat>>,
    /// ScoreReport field used as the metric score [default: overall].
    #[arg(long, value_enum)]
    pub field: Option<Field>,
    /// Output file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

overlay_fields!(BenchArgs {
    scores,
    judgments,
    gold,
    stats,
    field,
    out
});

#[derive(Clone, Debug, Default, Serialize)]
pub struct BenchOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correlation: Option<BenchmarkReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captoken: Option<BenchmarkReport>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScoreInput {
    Line(ScoreLine),
    Report(Box<ScoreReport>),
}

fn read_scores(path: &Path, field: Field) -> Result<(Vec<ScoreLine>, Vec<ScoreReport>), Failure> {
    let inputs: Vec<ScoreInput> = read_jsonl(path).context(path.display())?;
    let mut lines = Vec::new();
    let mut reports = Vec::new();
    for (i, s) in inputs.into_iter().enumerate() {
        match s {
            ScoreInput::Line(l) => lines.push(l),
            ScoreInput::Report(r) => {
                let missing = || Failure::input(format!("{}: line {}", path.display(), i + 1));
                let score = match field {
                    Field::Overall => r.overall,
                    Field::Precision => r.precision,
                    Field::Recall => r.recall,
                    Field::Plus => r.plus.ok_or_else(missing)?,
                };
                lines.push(ScoreLine {
                    image_id: r.image_id.clone().ok_or_else(missing)?,
                    caption_idx: r.caption_idx.ok_or_else(missing)?,
                    score,
                });
                reports.push(*r);
            }
        }
    }
    Ok((lines, reports))
}

pub fn run(global: &GlobalArgs, args: BenchArgs) -> Result<(), Failure> {
    let scores = args
        .scores
        .as_ref()
        .ok_or_else(|| Failure::input("--scores is required"))?;
    if args.judgments.is_none() && args.gold.is_none() {
        return Err(Failure::input("give --judgments, --gold or both"));
    }
    let stats = args
        .stats
        .clone()
        .unwrap_or_else(|| vec![Stat::KendallB, Stat::KendallC]);
    let field = args.field.unwrap_or_default();
    log_config(
        "bench",
        global,
        serde_json::json!({
            "scores": scores,
            "judgments": args.judgments,
            "gold": args.gold,
            "stats": stats,
            "field": field,
            "out": args.out,
        }),
    );

    let (lines, reports) = read_scores(scores, field)?;
    let mut out = BenchOutput::default();
    if let Some(path) = &args.judgments {
        let judgments: Vec<JudgmentLine> = read_jsonl(path).context(path.display())?;
        let stats: Vec<Statistic> = stats.iter().map(|&s| s.into()).collect();
        out.correlation = Some(run_benchmark(&lines, &judgments, &stats)?);
    }
    if let Some(path) = &args.gold {
        let gold: Vec<CapTokenGold> = read_jsonl(path).context(path.display())?;
        out.captoken = Some(run_captoken_benchmark(
            &reports,
            &gold,
            &PosSet::evaluation(),
        )?);
    }
    emit(args.out.as_deref(), &(serde_json::to_string(&out)? + "\n"))
}
