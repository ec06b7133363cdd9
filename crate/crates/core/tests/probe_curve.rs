//! Scratch probe: cloud CD along the training trajectory, measured by
//! training in 5-epoch chunks (the shuffle/augment stream is continuous
//! across calls, so the trajectory equals one 30-epoch run). Delete before
//! commit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use puflow::diffcore::{Adam, AdamConfig};
use puflow::embedding::EmbedConfig;
use puflow::flow::FlowConfig;
use puflow::interpolation::InterpConfig;
use puflow::iodata::{builtin_shape, sample_mesh_uniform};
use puflow::losses::chamfer_distance;
use puflow::model::{Model, ModelConfig, Variant};
use puflow::pipeline::{jitter_baseline, upsample_cloud, PipelineConfig};
use puflow::training::{build_patch_pairs, train, PatchPair, TrainConfig};

fn desk(variant: Variant) -> ModelConfig {
    ModelConfig {
        flow: FlowConfig { blocks: 4, cond_width: 8, hidden: 16, s_clamp: 10.0, passthrough: 1 },
        embed: EmbedConfig { blocks: 4, k: 8, grow_stages: 2, growth: 4, unit_width: 8, cond_width: 8 },
        interp: InterpConfig { k: 8, ratio: 4, unit_width: 8, hidden: 32 },
        variant,
    }
}

fn shape_cloud(name: &str, count: usize, seed: u64) -> Vec<[f64; 3]> {
    let mesh = builtin_shape::<f64>(name, 48).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mesh_uniform(&mesh, count, &mut rng).unwrap().points
}

fn pairs_2000() -> Vec<PatchPair<f64>> {
    let mut pairs = Vec::with_capacity(2000);
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    for (i, shape) in ["torus", "bumpy-sphere"].iter().enumerate() {
        let sparse = shape_cloud(shape, 2048, 7010 + i as u64);
        let dense = shape_cloud(shape, 8192, 7020 + i as u64);
        pairs.extend(build_patch_pairs(&sparse, &dense, 1000, 64, 4, &mut rng).unwrap());
    }
    pairs
}

fn trace(tag: &str, variant: Variant) {
    let pairs = pairs_2000();
    let input = shape_cloud("sphere", 2048, 7030);
    let gt = shape_cloud("sphere", 8192, 7031);
    let pipeline = PipelineConfig { patch_size: 64, coverage: 3.0, jobs: 1 };
    let mut b_rng = ChaCha8Rng::seed_from_u64(7050);
    let baseline = jitter_baseline(&input, 4, &mut b_rng).unwrap();
    let cd_base = chamfer_distance(&baseline, &gt).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(7100);
    let mut model: Model<f64> = Model::new(desk(variant), &mut rng).unwrap();
    let tc = TrainConfig::default();
    let mut adam = Adam::new(&model.store, AdamConfig::with_lr(tc.learning_rate));
    let mut train_rng = ChaCha8Rng::seed_from_u64(tc.seed);

    let cd_of = |m: &Model<f64>| -> f64 {
        let mut up_rng = ChaCha8Rng::seed_from_u64(7040);
        let out = upsample_cloud(m, &input, &pipeline, &mut up_rng).unwrap();
        chamfer_distance(&out, &gt).unwrap()
    };

    let mut chunk_cfg = tc.clone();
    chunk_cfg.epochs = 5;
    for chunk in 0..6 {
        let mut last_val = None;
        train(&mut model, &mut adam, &pairs, &chunk_cfg, &mut train_rng, |s| {
            last_val = s.val_emd;
        })
        .unwrap();
        let cd = cd_of(&model);
        println!(
            "[{tag}] epoch {:2}  val_emd {:?}  cloud cd {cd:.4e}  ratio {:.3}",
            (chunk + 1) * 5,
            last_val,
            cd / cd_base
        );
    }
}

#[test]
fn probe_cd_curve_full() {
    trace("full", Variant::Full);
}

#[test]
fn probe_cd_curve_coord() {
    trace("coord", Variant::CoordinateInterpolation);
}
