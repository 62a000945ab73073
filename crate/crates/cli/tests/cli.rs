//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use voxelform::encoder::ModelConfig;
use voxelform::encoding::TableMode;
use voxelform::scene::ply::{save_pointcloud, PlyFormat};
use voxelform::scene::{generate_noisy_volume_scene, generate_plane_scene, Axis, SignalMask};
use voxelform::stats::HistogramRecord;
use voxelform::voxel::{build_hierarchy, voxelize};
use voxelform_cli::dump::read_dump;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_voxelform"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(output: &Output, code: i32) {
    assert_eq!(
        output.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn small_config() -> ModelConfig {
    ModelConfig {
        format_version: 1,
        voxel_size: 0.05,
        layer_counts: vec![1, 1],
        window_sizes: vec![5, 5],
        channels: vec![8, 8],
        heads: vec![2, 2],
        table_mode: TableMode::VmDomainModulated,
        prompt_count: 2,
        domain_masks: vec![SignalMask::FULL, SignalMask::FULL],
        divisions_1d: 4,
        divisions_2d: 4,
        pool_neighbors: 4,
    }
}

fn write_config(path: &Path, config: &ModelConfig) {
    std::fs::write(path, serde_json::to_string_pretty(config).unwrap()).unwrap();
}

#[test]
fn analyze_sparsity_finds_the_plane_signature() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    let plane = generate_plane_scene(1.0, 0.02, Axis::Z);
    save_pointcloud(&plane, scenes.join("plane.ply"), PlyFormat::BinaryLittleEndian).unwrap();
    let out_path = dir.path().join("sparsity.json");
    let output = run(&[
        "analyze",
        "sparsity",
        "--input-dir",
        scenes.to_str().unwrap(),
        "--voxel-size",
        "0.02",
        "--window",
        "5",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let record: HistogramRecord =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(record.format_version, 1);
    assert_eq!(record.signal, "occupancy");
    let nch = record.histogram();
    nch.validate().unwrap();
    // The interior windows place a large jump in the bin containing 0.2.
    let bin = nch.bin_of(0.2);
    assert!(nch.bin_mass(bin) > 0.5, "mass {}", nch.bin_mass(bin));
}

#[test]
fn analyze_variance_on_constant_colors_masses_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    let pc = generate_noisy_volume_scene(400, [0.5, 0.5, 0.5], 0.0, 0.0, 11);
    save_pointcloud(&pc, scenes.join("flat.ply"), PlyFormat::BinaryLittleEndian).unwrap();
    let out_path = dir.path().join("variance.json");
    let output = run(&[
        "analyze",
        "variance",
        "--signal",
        "color",
        "--input-dir",
        scenes.to_str().unwrap(),
        "--voxel-size",
        "0.02",
        "--window",
        "5",
        "--output",
        out_path.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let record: HistogramRecord =
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!((record.cumulative[0] - 1.0).abs() < 1e-12);
}

#[test]
fn analyze_variance_without_signal_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = run(&[
        "analyze",
        "variance",
        "--input-dir",
        dir.path().to_str().unwrap(),
        "--voxel-size",
        "0.02",
        "--window",
        "5",
        "--output",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_exit(&output, 64);
}

#[test]
fn analyze_missing_signal_in_cloud_is_a_mask_error() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    std::fs::create_dir(&scenes).unwrap();
    let pc = generate_noisy_volume_scene(100, [0.5, 0.5, 0.5], 0.0, 0.0, 1);
    let bare = voxelform::augment::project_signals(&pc, SignalMask::POSITION).unwrap();
    save_pointcloud(&bare, scenes.join("bare.ply"), PlyFormat::BinaryLittleEndian).unwrap();
    let output = run(&[
        "analyze",
        "variance",
        "--signal",
        "color",
        "--input-dir",
        scenes.to_str().unwrap(),
        "--voxel-size",
        "0.02",
        "--window",
        "5",
        "--output",
        dir.path().join("x.json").to_str().unwrap(),
    ]);
    assert_exit(&output, 3);
}

#[test]
fn forward_dumps_are_deterministic_and_match_hierarchy() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let config_path = dir.path().join("config.json");
    write_config(&config_path, &config);
    let pc = generate_noisy_volume_scene(200, [0.5, 0.5, 0.5], 0.01, 0.1, 7);
    let cloud_path = dir.path().join("cloud.ply");
    save_pointcloud(&pc, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();

    let out_a = dir.path().join("a.bin");
    let out_b = dir.path().join("b.bin");
    for out in [&out_a, &out_b] {
        let output = run(&[
            "forward",
            "--config",
            config_path.to_str().unwrap(),
            "--input",
            cloud_path.to_str().unwrap(),
            "--domain",
            "0",
            "--seed",
            "5",
            "--output",
            out.to_str().unwrap(),
        ]);
        assert_exit(&output, 0);
    }
    let bytes_a = std::fs::read(&out_a).unwrap();
    let bytes_b = std::fs::read(&out_b).unwrap();
    assert_eq!(bytes_a, bytes_b);

    // The cloud was canonicalized through the PLY writer; recount the
    // hierarchy from the same file the binary read.
    let reloaded = voxelform::scene::ply::load_pointcloud(&cloud_path).unwrap();
    let levels = read_dump(&bytes_a).unwrap();
    let grids = build_hierarchy(voxelize(&reloaded, config.voxel_size).unwrap(), 2);
    assert_eq!(levels.len(), 2);
    for (level, grid) in levels.iter().zip(grids.iter()) {
        assert_eq!(level.coords.len(), grid.len());
        assert_eq!(level.features.len(), grid.len());
        for (coord, cell) in level.coords.iter().zip(grid.cells().iter()) {
            assert_eq!(*coord, cell.coord);
        }
    }
}

#[test]
fn forward_rejects_out_of_range_domain() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write_config(&config_path, &small_config());
    let pc = generate_noisy_volume_scene(50, [0.3, 0.3, 0.3], 0.01, 0.1, 2);
    let cloud_path = dir.path().join("cloud.ply");
    save_pointcloud(&pc, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();
    let output = run(&[
        "forward",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        cloud_path.to_str().unwrap(),
        "--domain",
        "7",
        "--output",
        dir.path().join("x.bin").to_str().unwrap(),
    ]);
    assert_exit(&output, 3);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("0..2"), "stderr: {stderr}");
}

#[test]
fn forward_checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    write_config(&config_path, &small_config());
    let pc = generate_noisy_volume_scene(120, [0.4, 0.4, 0.4], 0.01, 0.1, 3);
    let cloud_path = dir.path().join("cloud.ply");
    save_pointcloud(&pc, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let out_a = dir.path().join("a.bin");
    let output = run(&[
        "forward",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        cloud_path.to_str().unwrap(),
        "--domain",
        "1",
        "--seed",
        "9",
        "--save-checkpoint",
        ckpt.to_str().unwrap(),
        "--output",
        out_a.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    let out_b = dir.path().join("b.bin");
    let output = run(&[
        "forward",
        "--config",
        config_path.to_str().unwrap(),
        "--input",
        cloud_path.to_str().unwrap(),
        "--domain",
        "1",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--output",
        out_b.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    assert_eq!(std::fs::read(&out_a).unwrap(), std::fs::read(&out_b).unwrap());
}

#[test]
fn gradcheck_is_deterministic_and_detects_corruption() {
    let ok = run(&["gradcheck", "--trials", "2", "--seed", "4", "--modes", "base,vm"]);
    assert_exit(&ok, 0);
    let again = run(&["gradcheck", "--trials", "2", "--seed", "4", "--modes", "base,vm"]);
    assert_eq!(ok.stdout, again.stdout);
    let corrupt = run(&[
        "gradcheck",
        "--trials",
        "1",
        "--modes",
        "base",
        "--corrupt-gradient",
    ]);
    assert_exit(&corrupt, 1);
}

#[test]
fn params_reports_modulation_entries() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config.table_mode = TableMode::DomainModulated;
    config.divisions_1d = 16;
    let config_path = dir.path().join("config.json");
    write_config(&config_path, &config);
    let output = run(&["params", "--config", config_path.to_str().unwrap()]);
    assert_exit(&output, 0);
    let report: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("valid JSON on stdout");
    assert_eq!(report["modulation_entries_per_block"], 864);
    assert_eq!(report["format_version"], 1);
    assert_eq!(
        report["total"].as_u64().unwrap(),
        report["embedding"].as_u64().unwrap()
            + report["blocks_shared"].as_u64().unwrap()
            + report["blocks_domain_specific"].as_u64().unwrap()
            + report["other"].as_u64().unwrap()
    );
}

#[test]
fn augment_writes_one_file_per_subset() {
    let dir = tempfile::tempdir().unwrap();
    let pc = generate_noisy_volume_scene(60, [0.4, 0.4, 0.4], 0.01, 0.1, 13);
    let cloud_path = dir.path().join("scene.ply");
    save_pointcloud(&pc, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();
    let out_dir = dir.path().join("variants");
    let output = run(&[
        "augment",
        "--input",
        cloud_path.to_str().unwrap(),
        "--subsets",
        "p,pc,pn,pcn",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_exit(&output, 0);
    for label in ["p", "pc", "pn", "pcn"] {
        let path = out_dir.join(format!("scene_{label}.ply"));
        let variant = voxelform::scene::ply::load_pointcloud(&path).unwrap();
        assert_eq!(variant.signal_mask().label(), label);
        assert_eq!(variant.len(), pc.len());
    }
}

#[test]
fn augment_rejects_unavailable_subset() {
    let dir = tempfile::tempdir().unwrap();
    let pc = generate_noisy_volume_scene(30, [0.3, 0.3, 0.3], 0.01, 0.1, 14);
    let bare = voxelform::augment::project_signals(&pc, SignalMask::new(true, false)).unwrap();
    let cloud_path = dir.path().join("scene.ply");
    save_pointcloud(&bare, &cloud_path, PlyFormat::BinaryLittleEndian).unwrap();
    let output = run(&[
        "augment",
        "--input",
        cloud_path.to_str().unwrap(),
        "--subsets",
        "p,pn",
        "--output-dir",
        dir.path().join("variants").to_str().unwrap(),
    ]);
    assert_exit(&output, 3);
}

#[test]
fn divergence_direct_mode_prints_endpoint() {
    let output = run(&["divergence", "--err-s", "0", "--err-t", "0"]);
    assert_exit(&output, 0);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("2.000"), "stdout: {stdout}");
    let missing = run(&["divergence", "--err-s", "0.5"]);
    assert_exit(&missing, 64);
}
