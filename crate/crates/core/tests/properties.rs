//! Cross-module property tests.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxelform::attention::{
    attention_weights, window_attention_forward, AttentionConfig, ProjectionSet, ScoreSupplier,
    WindowContext,
};
use voxelform::augment::virtualize_signals;
use voxelform::encoding::{LookupTableSet, QuantizerSpec, TableMode, TableRole};
use voxelform::scene::ply::{load_from_bytes, to_bytes, PlyFormat};
use voxelform::scene::{PointCloud, PointRecord, SignalMask};
use voxelform::stats::NormalizedCumulativeHistogram;
use voxelform::voxel::voxelize;

fn arb_point() -> impl Strategy<Value = PointRecord> {
    (
        prop::array::uniform3(-2.0f64..2.0),
        prop::array::uniform3(0.0f64..1.0),
        prop::array::uniform3(-1.0f64..1.0),
    )
        .prop_map(|(position, color, raw_normal)| {
            let len = raw_normal.iter().map(|v| v * v).sum::<f64>().sqrt();
            let normal = if len > 1e-3 {
                [raw_normal[0] / len, raw_normal[1] / len, raw_normal[2] / len]
            } else {
                [0.0, 0.0, 1.0]
            };
            PointRecord {
                position,
                color: Some(color),
                normal: Some(normal),
            }
        })
}

fn arb_cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(arb_point(), 1..60)
        .prop_map(|points| PointCloud::new(points, SignalMask::FULL).expect("valid points"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantize_is_monotone_per_component(lo in -3.0f64..-0.1, width in 0.2f64..4.0,
                                          a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let spec = QuantizerSpec::new(vec![lo], vec![lo + width], 16, 4).unwrap();
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        let qx = spec.quantize(&[x]).unwrap();
        let qy = spec.quantize(&[y]).unwrap();
        prop_assert!(qx.bins_1d[0] <= qy.bins_1d[0]);
        prop_assert!(qx.bins_2d[0] <= qy.bins_2d[0]);
    }

    #[test]
    fn bin_centers_are_fixed_points(lo in -2.0f64..0.0, width in 0.5f64..3.0,
                                    divisions in 2usize..24, bin_frac in 0.0f64..1.0) {
        let spec = QuantizerSpec::new(vec![lo], vec![lo + width], divisions, 4).unwrap();
        let bin = ((bin_frac * divisions as f64) as usize).min(divisions - 1);
        let center = spec.bin_center(0, bin, divisions);
        prop_assert_eq!(spec.bin(0, center, divisions), bin);
    }

    #[test]
    fn voxelize_is_permutation_invariant(cloud in arb_cloud(), seed in 0u64..1000) {
        let grid_a = voxelize(&cloud, 0.21).unwrap();
        let mut points = cloud.points().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..points.len()).rev() {
            let j = rng.random_range(0..=i);
            points.swap(i, j);
        }
        let shuffled = PointCloud::new(points, cloud.signal_mask()).unwrap();
        let grid_b = voxelize(&shuffled, 0.21).unwrap();
        prop_assert_eq!(grid_a.len(), grid_b.len());
        for (a, b) in grid_a.cells().iter().zip(grid_b.cells().iter()) {
            prop_assert_eq!(a.coord, b.coord);
            prop_assert_eq!(&a.representative.position, &b.representative.position);
        }
    }

    #[test]
    fn ply_round_trips_after_canonicalization(cloud in arb_cloud()) {
        // A first write/read canonicalizes to file-representable values;
        // from there the binary encoding round-trips bitwise and the ASCII
        // encoding stays within 1e-6 per component.
        let canon = load_from_bytes(&to_bytes(&cloud, PlyFormat::BinaryLittleEndian)).unwrap();
        let binary_again =
            load_from_bytes(&to_bytes(&canon, PlyFormat::BinaryLittleEndian)).unwrap();
        prop_assert_eq!(&canon, &binary_again);
        let ascii_again = load_from_bytes(&to_bytes(&canon, PlyFormat::Ascii)).unwrap();
        for (a, b) in canon.points().iter().zip(ascii_again.points().iter()) {
            for ch in 0..3 {
                prop_assert!((a.position[ch] - b.position[ch]).abs() <= 1e-6);
                prop_assert!(
                    (a.color.unwrap()[ch] - b.color.unwrap()[ch]).abs() <= 1e-6
                );
                prop_assert!(
                    (a.normal.unwrap()[ch] - b.normal.unwrap()[ch]).abs() <= 1e-6
                );
            }
        }
    }

    #[test]
    fn loaded_mask_matches_header(has_color in any::<bool>(), has_normal in any::<bool>()) {
        let mut header = String::from("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n");
        let mut row = String::from("0 0 0");
        if has_color {
            header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
            row.push_str(" 10 20 30");
        }
        if has_normal {
            header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
            row.push_str(" 0 0 1");
        }
        header.push_str("end_header\n");
        header.push_str(&row);
        header.push('\n');
        let pc = load_from_bytes(header.as_bytes()).unwrap();
        prop_assert_eq!(pc.signal_mask(), SignalMask::new(has_color, has_normal));
    }

    #[test]
    fn histograms_are_monotone_with_unit_tail(samples in prop::collection::vec(-0.2f64..1.2, 1..200),
                                              bins in 1usize..80) {
        let nch = NormalizedCumulativeHistogram::from_samples(&samples, bins).unwrap();
        nch.validate().unwrap();
        let merged = NormalizedCumulativeHistogram::merge(&[nch.clone(), nch]).unwrap();
        merged.validate().unwrap();
    }

    #[test]
    fn virtualize_preserves_existing_channels(cloud in arb_cloud()) {
        let projected = voxelform::augment::project_signals(&cloud, SignalMask::new(true, false)).unwrap();
        let refilled = virtualize_signals(&projected, SignalMask::FULL).unwrap();
        for (a, b) in cloud.points().iter().zip(refilled.points().iter()) {
            prop_assert_eq!(&a.position, &b.position);
            prop_assert_eq!(&a.color, &b.color);
            prop_assert_eq!(&b.normal, &Some(voxelform::augment::VIRTUAL_NORMAL));
        }
    }
}

struct WindowFixture {
    features: Vec<Vec<f64>>,
    signals: Vec<Vec<f64>>,
    proj: ProjectionSet,
    tables: LookupTableSet,
    quantizer: QuantizerSpec,
    prompts: Vec<Vec<f64>>,
    config: AttentionConfig,
    domain: usize,
}

impl WindowFixture {
    fn random(rng: &mut ChaCha8Rng, mode: TableMode, n: usize, prompt_count: usize) -> Self {
        let dim = 8;
        let config = AttentionConfig::new(dim, 2, prompt_count).unwrap();
        let quantizer = QuantizerSpec::for_signals(5, 0.1, 16, 4);
        let mut tables = LookupTableSet::new(mode, dim, 9, 2, 16, 4).unwrap();
        tables.init_with_rng(rng);
        let mut proj = ProjectionSet::zeros(dim);
        proj.init_with_rng(rng, 0.5);
        let features = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let signals = (0..n)
            .map(|_| {
                let mut s: Vec<f64> = Vec::with_capacity(9);
                for _ in 0..3 {
                    s.push(rng.random_range(0.0..0.4));
                }
                for _ in 0..3 {
                    s.push(rng.random_range(0.0..1.0));
                }
                let raw: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let len = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
                s.extend(raw.iter().map(|v| v / len));
                s
            })
            .collect();
        let prompts = (0..prompt_count)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        WindowFixture {
            features,
            signals,
            proj,
            tables,
            quantizer,
            prompts,
            config,
            domain: rng.random_range(0..2),
        }
    }

    fn ctx(&self) -> WindowContext<'_> {
        WindowContext {
            proj: &self.proj,
            tables: &self.tables,
            quantizer: &self.quantizer,
            prompts: &self.prompts,
            domain: self.domain,
            config: &self.config,
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for trial in 0..20 {
        let mode = TableMode::ALL[trial % 4];
        let fx = WindowFixture::random(&mut rng, mode, 8, 3);
        let out = window_attention_forward(&fx.features, &fx.signals, &fx.ctx()).unwrap();
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..8).collect();
            for i in (1..8).rev() {
                let j = rng.random_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        let features: Vec<Vec<f64>> = perm.iter().map(|&i| fx.features[i].clone()).collect();
        let signals: Vec<Vec<f64>> = perm.iter().map(|&i| fx.signals[i].clone()).collect();
        let permuted = window_attention_forward(&features, &signals, &fx.ctx()).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            for ch in 0..8 {
                assert!(
                    (permuted[slot][ch] - out[src][ch]).abs() < 1e-12,
                    "trial {trial} slot {slot} ch {ch}"
                );
            }
        }
    }
}

#[test]
fn softmax_weights_are_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(72);
    let fx = WindowFixture::random(&mut rng, TableMode::Vm, 7, 4);
    let weights = attention_weights(&fx.features, &fx.signals, &fx.ctx()).unwrap();
    let supplier = ScoreSupplier::new(&fx.features, &fx.signals, fx.ctx()).unwrap();
    let shift = 7.25;
    for i in 0..7 {
        for h in 0..2 {
            let row = supplier.score_row(i, h).unwrap();
            let shifted: Vec<f64> = row.iter().map(|s| s + shift).collect();
            let max = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = shifted.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (w, e) in weights[i][h].iter().zip(exps.iter()) {
                assert!((w - e / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn outputs_lie_in_value_convex_hull() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    for trial in 0..12 {
        let mode = TableMode::ALL[trial % 4];
        let fx = WindowFixture::random(&mut rng, mode, 6, 5);
        let ctx = fx.ctx();
        let out = window_attention_forward(&fx.features, &fx.signals, &ctx).unwrap();
        let weights = attention_weights(&fx.features, &fx.signals, &ctx).unwrap();
        // Candidate vectors per pair: projected value plus the value-route
        // encoding; prompts contribute their projected values.
        for i in 0..6 {
            let mut recon = [0.0; 8];
            for h in 0..2 {
                let (lo, hi) = (h * 4, (h + 1) * 4);
                for j in 0..6 {
                    let delta: Vec<f64> = fx.signals[i]
                        .iter()
                        .zip(fx.signals[j].iter())
                        .map(|(a, b)| a - b)
                        .collect();
                    let q = fx.quantizer.quantize(&delta).unwrap();
                    let tv = fx.tables.encode(TableRole::Value, &q, fx.domain).unwrap();
                    let v = fx.proj.value.left_mul(&fx.features[j]);
                    for ch in lo..hi {
                        recon[ch] += weights[i][h][j] * (v[ch] + tv[ch]);
                    }
                }
                for (p, prompt) in fx.prompts.iter().enumerate() {
                    let pv = fx.proj.value.left_mul(prompt);
                    for ch in lo..hi {
                        recon[ch] += weights[i][h][6 + p] * pv[ch];
                    }
                }
            }
            for ch in 0..8 {
                assert!(
                    (out[i][ch] - recon[ch]).abs() <= 1e-9,
                    "trial {trial} voxel {i} channel {ch}"
                );
            }
        }
    }
}
