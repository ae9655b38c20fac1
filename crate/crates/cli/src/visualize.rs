use std::fmt::Write as _;
use std::io::Cursor;
use std::path::PathBuf;

use base64::Engine;
use clap::Args;
use image::{ImageFormat, RgbImage};
use infometic_core::scoring::score_pair;
use infometic_core::{Error, ScoreReport};
use serde::{Deserialize, Serialize};

use crate::config::{emit, log_config, overlay_fields, require, GlobalArgs};
use crate::failure::{Context, Failure};
use crate::score::{options, PairInput};

#[derive(Clone, Debug, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualizeArgs {
    /// Image file drawn under the region boxes.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// JSON regions file, as for `score`.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    /// POS-tagged caption, as for `score`.
    #[arg(long)]
    pub caption: Option<String>,
    /// Render an existing ScoreReport JSON instead of scoring.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Token threshold [default: 0.1, or the report's own].
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub plus: Option<bool>,
    /// HTML output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

overlay_fields!(VisualizeArgs {
    image,
    regions,
    caption,
    report,
    beta,
    plus,
    out
});

pub fn run(global: &GlobalArgs, args: VisualizeArgs) -> Result<(), Failure> {
    let out = require(&args.out, "out")?;
    let image_path = require(&args.image, "image")?;
    log_config(
        "visualize",
        global,
        serde_json::json!({
            "image": image_path,
            "regions": args.regions,
            "caption": args.caption,
            "report": args.report,
            "beta": args.beta,
            "plus": args.plus.unwrap_or(false),
            "out": out,
        }),
    );

    let (image, report) = match &args.report {
        Some(path) => {
            let image = image::open(image_path)
                .map_err(Error::from)
                .context(image_path.display())?
                .to_rgb8();
            let text = std::fs::read_to_string(path).context(path.display())?;
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            let mut report: ScoreReport = serde_json::from_str(first).context(path.display())?;
            if let Some(beta) = args.beta {
                report.rethreshold(options(Some(beta), None)?.beta)?;
            }
            (image, report)
        }
        None => {
            let opts = options(args.beta, args.plus)?;
            let model = global.load_model()?;
            let backbone = global.open_backbone(Some(model.d()))?;
            let pair = PairInput::load(
                image_path,
                require(&args.regions, "regions")?,
                require(&args.caption, "caption")?,
            )?;
            let report = score_pair(
                &pair.image,
                &pair.regions,
                &pair.caption,
                &model,
                backbone.as_ref(),
                opts,
            )?;
            (pair.image, report)
        }
    };
    let html = render_html(&image, &report)?;
    std::fs::write(out, html).context(out.display())?;
    emit(None, &(serde_json::to_string(&report)? + "\n"))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

/// Opacity in `[0.1, 1]` relative to the largest score.
fn heat(score: f64, max: f64) -> f64 {
    if max > 0.0 {
        0.1 + 0.9 * (score / max).clamp(0.0, 1.0)
    } else {
        0.1
    }
}

/// Self-contained page: the image with one SVG group per region, and the
/// caption with tokens shaded by their score.
pub fn render_html(image: &RgbImage, report: &ScoreReport) -> Result<String, Failure> {
    let mut png = Vec::new();
    image
        .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
        .map_err(Error::from)?;
    let data = base64::engine::general_purpose::STANDARD.encode(&png);
    let (w, h) = image.dimensions();

    let max_v = report.alpha_v.iter().copied().fold(0.0, f64::max);
    let max_t = report.alpha_t.iter().copied().fold(0.0, f64::max);
    let mut svg = String::new();
    for r in &report.regions {
        let [x1, y1, x2, y2] = r.bbox;
        let dash = if r.mentioned {
            ""
        } else {
            " stroke-dasharray=\"4 3\""
        };
        let _ = write!(
            svg,
            "<g data-region=\"{idx}\"><title>region {idx}: {score:.4}{flag}</title>\
             <rect x=\"{x1}\" y=\"{y1}\" width=\"{bw}\" height=\"{bh}\" fill=\"none\" \
             stroke=\"rgb(38,139,210)\" stroke-opacity=\"{op:.3}\" stroke-width=\"2\"{dash}/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"10\" fill=\"rgb(38,139,210)\">{idx}</text></g>",
            idx = r.idx,
            score = r.score,
            flag = if r.mentioned { " mentioned" } else { "" },
            bw = x2 - x1,
            bh = y2 - y1,
            op = heat(r.score, max_v),
            tx = x1 + 2.0,
            ty = y1 + 10.0,
        );
    }

    let judged = report.correct_word_mask();
    let mut caption = String::new();
    for (i, tok) in report.tokens.iter().enumerate() {
        let score = report.alpha_t.get(i).copied().unwrap_or(0.0);
        let class = match judged.get(i).copied().flatten() {
            Some(true) => "ok",
            Some(false) => "bad",
            None => "plain",
        };
        let _ = write!(
            caption,
            "<span class=\"tok {class}\" title=\"{score:.4}\" \
             style=\"background: rgba(220,50,47,{op:.3})\">{tok}</span> ",
            op = heat(score, max_t) * 0.6,
            tok = escape(tok),
        );
    }

    let plus = report
        .plus
        .map(|p| format!("<tr><th>plus</th><td>{p:.4}</td></tr>"))
        .unwrap_or_default();
    Ok(format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>caption score</title>\
         <style>body{{font-family:sans-serif;margin:1em}}.tok{{padding:2px 3px;border-radius:3px}}\
         .bad{{text-decoration:line-through;font-weight:bold}}.ok{{font-weight:bold}}\
         td,th{{text-align:left;padding:0 1em 0 0}}</style></head><body>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\
         <image href=\"data:image/png;base64,{data}\" width=\"{w}\" height=\"{h}\"/>{svg}</svg>\n\
         <p class=\"caption\">{caption}</p>\n\
         <table><tr><th>precision</th><td>{p:.4}</td></tr><tr><th>recall</th><td>{r:.4}</td></tr>\
         <tr><th>overall</th><td>{o:.4}</td></tr>{plus}<tr><th>null</th><td>{n:.4}{nf}</td></tr>\
         <tr><th>beta</th><td>{b}</td></tr></table>\n</body></html>\n",
        p = report.precision,
        r = report.recall,
        o = report.overall,
        n = report.null_score,
        nf = if report.null_flag { " (missing content)" } else { "" },
        b = report.beta,
    ))
}
