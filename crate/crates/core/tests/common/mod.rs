//! Synthetic-world fixtures shared by integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use infometic_core::datagen::{build_training_sets, DatagenConfig, TrainingSets};
use infometic_core::encoding::{
    extract_caption_tokens, extract_image_tokens, PosSet, TaggedCaption,
};
use infometic_core::evalharness::{
    captoken_accuracy, retrieval_recall, score_matrices, TokenJudgment,
};
use infometic_core::scoring::{score_features, ScoreOptions};
use infometic_core::synth::{generate, SynthConfig, SynthSample, NOUNS};
use infometic_core::training::{
    objective_grad, objective_loss, train, Batch, CoarseBatch, FineBatch, FineTextSample,
    FineVisionSample, ImageEntry, Objective, StepMetrics, TrainConfig, TrainingData,
};
use infometic_core::{
    CaptionTokenFeatures, ImageTokenFeatures, Model, ModelConfig, SyntheticBackbone,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub mod invariant;
pub mod oracle;

pub const D: usize = 16;

pub struct Toy {
    pub world: SynthConfig,
    pub backbone: SyntheticBackbone,
    pub train: Vec<SynthSample>,
    pub heldout: Vec<SynthSample>,
    pub sets: TrainingSets,
    pub data: TrainingData,
}

pub fn toy(train_images: usize, heldout_images: usize) -> Toy {
    toy_with(SynthConfig::default(), train_images, heldout_images)
}

pub fn toy_with(world: SynthConfig, train_images: usize, heldout_images: usize) -> Toy {
    let backbone = SyntheticBackbone::new(D, 0);
    let train = generate(
        &SynthConfig {
            num_images: train_images,
            seed: 0,
            ..world.clone()
        },
        &backbone,
    )
    .unwrap();
    let heldout = generate(
        &SynthConfig {
            num_images: heldout_images,
            seed: 1,
            ..world.clone()
        },
        &backbone,
    )
    .unwrap();
    let records: Vec<_> = train.iter().map(|s| s.record.clone()).collect();
    let (sets, _) = build_training_sets(&records, &DatagenConfig::default()).unwrap();
    let images: BTreeMap<&str, &SynthSample> = train
        .iter()
        .map(|s| (s.record.image_id.as_str(), s))
        .collect();
    let data = TrainingData::build(&records, &sets, &backbone, &PosSet::training(), |r| {
        Ok(images[r.image_id.as_str()].image.clone())
    })
    .unwrap();
    Toy {
        world,
        backbone,
        train,
        heldout,
        sets,
        data,
    }
}

pub fn train_model(toy: &Toy, cfg: &TrainConfig) -> (Model, Vec<StepMetrics>) {
    train_model_with(toy, cfg, ModelConfig::desk(D, cfg.seed))
}

pub fn train_model_with(
    toy: &Toy,
    cfg: &TrainConfig,
    model_cfg: ModelConfig,
) -> (Model, Vec<StepMetrics>) {
    let mut model = Model::new(model_cfg).unwrap();
    let log = train(&mut model, &toy.data, cfg, |_, _| Ok(())).unwrap();
    (model, log)
}

pub fn image_features(toy: &Toy, s: &SynthSample) -> ImageTokenFeatures {
    let regions = s.record.regions(s.image.dimensions()).unwrap();
    extract_image_tokens(&s.image, &regions, &toy.backbone).unwrap()
}

pub fn caption_features(toy: &Toy, c: &TaggedCaption) -> CaptionTokenFeatures {
    extract_caption_tokens(c, &toy.backbone, &PosSet::training()).unwrap()
}

/// Mean in-batch top-1 retrieval over consecutive held-out batches of `b`
/// images, each paired with its full caption.
pub fn retrieval_top1(model: &Model, toy: &Toy, b: usize) -> (f64, f64) {
    retrieval_top1_on(model, toy, &toy.heldout, b)
}

pub fn retrieval_top1_on(
    model: &Model,
    toy: &Toy,
    samples: &[SynthSample],
    b: usize,
) -> (f64, f64) {
    let (mut i2t, mut t2i, mut n) = (0.0, 0.0, 0.0);
    for chunk in samples.chunks(b).filter(|c| c.len() == b) {
        let imgs: Vec<_> = chunk.iter().map(|s| image_features(toy, s)).collect();
        let caps: Vec<_> = chunk
            .iter()
            .map(|s| caption_features(toy, &s.captions().unwrap()[0]))
            .collect();
        let m = score_matrices(model, &imgs, &caps).unwrap();
        let r = retrieval_recall(m.overall().view(), 1).unwrap();
        i2t += r.image_to_text;
        t2i += r.text_to_image;
        n += 1.0;
    }
    (i2t / n, t2i / n)
}

/// Text token accuracy on held-out full captions with one noun replaced by a
/// noun absent from the image.
pub fn polluted_text_accuracy(model: &Model, toy: &Toy, beta: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let eval_pos = PosSet::evaluation();
    let mut judgments = Vec::new();
    for s in &toy.heldout {
        let full = s.captions().unwrap().remove(0);
        let nouns: Vec<usize> = (0..full.len()).filter(|&i| full.pos[i] == "NOUN").collect();
        let idx = nouns[rng.random_range(0..nouns.len())];
        let absent = s.absent_nouns(toy.world.num_nouns);
        let mut polluted = full.clone();
        polluted.tokens[idx] = NOUNS[absent[rng.random_range(0..absent.len())]].to_string();
        let img = image_features(toy, s);
        let cap = caption_features(toy, &polluted);
        let opts = ScoreOptions { beta, plus: false };
        let report = score_features(model, &img, &cap, &s.record.boxes, None, opts).unwrap();
        let mentioned: Vec<usize> = (0..s.box_nouns.len())
            .filter(|&k| s.box_nouns[k].is_some())
            .collect();
        judgments.push(
            TokenJudgment::from_report(&report, &polluted.pos, &[idx], &mentioned, &eval_pos)
                .unwrap(),
        );
    }
    captoken_accuracy(&judgments).unwrap().text
}

/// Fraction of held-out triplets where the full caption out-recalls its
/// poorer sibling.
pub fn triplet_accuracy(model: &Model, toy: &Toy) -> f64 {
    let records: Vec<_> = toy.heldout.iter().map(|s| s.record.clone()).collect();
    let (sets, _) = build_training_sets(&records, &DatagenConfig::default()).unwrap();
    let by_id: BTreeMap<&str, &SynthSample> = toy
        .heldout
        .iter()
        .map(|s| (s.record.image_id.as_str(), s))
        .collect();
    let mut ok = 0usize;
    for t in &sets.htn {
        let s = by_id[t.image_id.as_str()];
        let caps = s.captions().unwrap();
        let img = image_features(toy, s);
        let feats = [
            caption_features(toy, &caps[t.pos_idx]),
            caption_features(toy, &caps[t.neg_idx]),
        ];
        let m = score_matrices(model, std::slice::from_ref(&img), &feats).unwrap();
        ok += (m.recall[[0, 0]] > m.recall[[0, 1]]) as usize;
    }
    ok as f64 / sets.htn.len() as f64
}

/// Random unit-norm rows.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut a = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    a
}

pub fn random_image(rng: &mut ChaCha8Rng, m: usize, d: usize) -> ImageTokenFeatures {
    let boxes = Array2::from_shape_simple_fn((m, 4), || rng.random::<f64>());
    let global = unit_rows(rng, 1, d).row(0).to_owned();
    ImageTokenFeatures::new(unit_rows(rng, m, d), global, boxes).unwrap()
}

pub fn random_caption(rng: &mut ChaCha8Rng, n: usize, d: usize) -> CaptionTokenFeatures {
    let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let pos_tags: Vec<String> = (0..n)
        .map(|i| if i % 2 == 1 { "NOUN" } else { "DET" }.to_string())
        .collect();
    CaptionTokenFeatures {
        token_feats: unit_rows(rng, n, d),
        global_feat: unit_rows(rng, 1, d).row(0).to_owned(),
        semantic_mask: PosSet::training().mask(&pos_tags),
        tokens,
        pos_tags,
        truncated: false,
    }
}

/// `b` images with `m` regions, each with two `n`-token captions, plus one
/// hard negative and one fine sample of each kind per image.
pub fn random_data(rng: &mut ChaCha8Rng, b: usize, m: usize, n: usize, d: usize) -> TrainingData {
    let mut data = TrainingData::default();
    for i in 0..b {
        data.images.push(ImageEntry {
            image_id: format!("img{i}"),
            features: random_image(rng, m, d),
            captions: vec![random_caption(rng, n, d), random_caption(rng, n, d)],
        });
        data.coarse.push((i, 0));
        data.htn.insert((i, 0), vec![1]);
        let mut labels: Vec<i8> = (0..n).map(|k| if k % 2 == 1 { 1 } else { -1 }).collect();
        labels[1] = 0;
        data.fine_text.push(FineTextSample {
            image: i,
            caption: random_caption(rng, n, d),
            labels,
        });
        let mut y_v = vec![0u8; m + 1];
        y_v[i % m] = 1;
        y_v[(i + 2) % m] = 1;
        data.fine_vision.push(FineVisionSample {
            image: i,
            caption: 0,
            labels: y_v,
        });
    }
    data
}

/// Largest relative error between the analytic and central-difference
/// directional derivative over `dirs` random parameter directions.
pub fn gradient_check(
    model: &Model,
    data: &TrainingData,
    batch: &Batch,
    objective: Objective,
    dirs: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let (_, grads) = objective_grad(model, data, batch, objective).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..dirs {
        let dir: BTreeMap<String, Array2<f64>> = model
            .params
            .iter()
            .map(|(k, t)| {
                let u = Array2::from_shape_simple_fn(t.raw_dim(), || {
                    rng.sample::<f64, _>(StandardNormal)
                });
                (k.clone(), u)
            })
            .collect();
        let norm = dir
            .values()
            .map(|u| u.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let analytic: f64 = dir.iter().map(|(k, u)| (&grads[k] * u).sum()).sum::<f64>() / norm;
        let shifted = |sign: f64| {
            let mut m = model.clone();
            for (k, t) in m.params.iter_mut() {
                t.scaled_add(sign * h / norm, &dir[k]);
            }
            objective_loss(&m, data, batch, objective).unwrap()
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

pub fn coarse_batch(b: usize) -> Batch {
    Batch::Coarse(CoarseBatch {
        pairs: (0..b).map(|i| (i, 0)).collect(),
        negatives: vec![Some(1); b],
    })
}

pub fn fine_batch(b: usize) -> Batch {
    Batch::Fine(FineBatch {
        text: (0..b).collect(),
        vision: (0..b).collect(),
    })
}
