//! Scratch probe: at identity initialization the latent-blend route should
//! equal coordinate blending exactly. Delete before commit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use puflow::embedding::EmbedConfig;
use puflow::flow::FlowConfig;
use puflow::interpolation::InterpConfig;
use puflow::iodata::{builtin_shape, sample_mesh_uniform};
use puflow::losses::{chamfer_distance, hausdorff_distance};
use puflow::model::{Model, ModelConfig, Variant};
use puflow::pipeline::{jitter_baseline, upsample_cloud, PipelineConfig};

fn cfg(variant: Variant) -> ModelConfig {
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

#[test]
fn probe_init_equivalence_and_cloud_cd() {
    let mut rng_a = ChaCha8Rng::seed_from_u64(7100);
    let full: Model<f64> = Model::new(cfg(Variant::Full), &mut rng_a).unwrap();
    let mut rng_b = ChaCha8Rng::seed_from_u64(7100);
    let coord: Model<f64> = Model::new(cfg(Variant::CoordinateInterpolation), &mut rng_b).unwrap();

    let mut prng = ChaCha8Rng::seed_from_u64(42);
    let patch: Vec<[f64; 3]> = (0..64)
        .map(|_| {
            [
                prng.gen_range(-1.0..1.0),
                prng.gen_range(-1.0..1.0),
                prng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let out_full = full.upsample_patch(&patch).unwrap();
    let out_coord = coord.upsample_patch(&patch).unwrap();
    let mut worst = 0.0f64;
    for (a, b) in out_full.iter().zip(&out_coord) {
        for c in 0..3 {
            worst = worst.max((a[c] - b[c]).abs());
        }
    }
    println!("init full-vs-coord max coordinate gap {worst:.3e}");

    // Cloud-level quality of the untouched initialization.
    let input = shape_cloud("sphere", 2048, 7030);
    let gt = shape_cloud("sphere", 8192, 7031);
    let pipeline = PipelineConfig { patch_size: 64, coverage: 3.0, jobs: 1 };
    let mut up_rng = ChaCha8Rng::seed_from_u64(7040);
    let out = upsample_cloud(&full, &input, &pipeline, &mut up_rng).unwrap();
    let mut b_rng = ChaCha8Rng::seed_from_u64(7050);
    let baseline = jitter_baseline(&input, 4, &mut b_rng).unwrap();
    let cd_out = chamfer_distance(&out, &gt).unwrap();
    let cd_base = chamfer_distance(&baseline, &gt).unwrap();
    println!(
        "init cloud cd {cd_out:.4e} baseline {cd_base:.4e} ratio {:.3} hd {:.4e} input hd {:.4e}",
        cd_out / cd_base,
        hausdorff_distance(&out, &gt).unwrap(),
        hausdorff_distance(&input, &gt).unwrap()
    );
}
