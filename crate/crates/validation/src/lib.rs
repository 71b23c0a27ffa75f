//! Shared setup for the acceptance suite: trend-run configurations and a
//! handle on the `owcl` binary.

use std::io;
use std::path::PathBuf;
use std::process::Command;

use owcl_core::adapt::AdaptationMode;
use owcl_core::dpg::{EvictionPolicy, MappingRank};
use owcl_core::driver::{ExperimentConfig, ExperimentMode};
use owcl_core::nn::VitConfig;

pub const TREND_SEEDS: [u64; 3] = [0, 1, 2];

/// Default benchmark data and schedule on a reduced backbone.
pub fn trend_base(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        lr: 2e-3,
        model: VitConfig {
            image_side: 32,
            patch_side: 4,
            width: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
        },
        ..ExperimentConfig::default()
    };
    c.pretrain.classes = 100;
    c
}

pub fn trend_variants(seed: u64) -> Vec<(&'static str, ExperimentConfig)> {
    let base = trend_base(seed);
    let with = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("dparl", base.clone()),
        ("dpg_frozen", with(&|c| c.mode = ExperimentMode::DpgFrozen)),
        ("static_pool", with(&|c| c.mode = ExperimentMode::StaticPool)),
        ("full_ft", with(&|c| c.adaptation = AdaptationMode::FullFt)),
        ("no_tokens", with(&|c| c.queue.capacity = 0)),
        ("filo", with(&|c| c.queue.policy = EvictionPolicy::Filo)),
        ("random", with(&|c| c.queue.policy = EvictionPolicy::Random)),
        ("rank_4", with(&|c| c.mapping.rank = MappingRank::Low(4))),
        ("rank_16", with(&|c| c.mapping.rank = MappingRank::Low(16))),
        ("rank_full", with(&|c| c.mapping.rank = MappingRank::Full)),
    ]
}

/// Builds `owcl` with the profile of the running executable and returns
/// its path. A no-op rebuild when the binary is current.
pub fn owcl_binary() -> io::Result<PathBuf> {
    let exe = std::env::current_exe()?;
    // <target>/<profile>/deps/<test binary>
    let profile_dir = exe
        .parent()
        .and_then(|d| d.parent())
        .ok_or_else(|| io::Error::other("unexpected test binary location"))?
        .to_path_buf();
    let profile = match profile_dir.file_name().and_then(|n| n.to_str()) {
        Some("debug") | None => "dev".to_string(),
        Some(other) => other.to_string(),
    };
    let target_dir = profile_dir
        .parent()
        .ok_or_else(|| io::Error::other("unexpected test binary location"))?;
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let status = Command::new(cargo)
        .args(["build", "--quiet", "--package", "owcl-cli", "--bin", "owcl", "--profile", &profile])
        .arg("--target-dir")
        .arg(target_dir)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .status()?;
    if !status.success() {
        return Err(io::Error::other(format!("building owcl failed: {status}")));
    }
    let bin = profile_dir.join(format!("owcl{}", std::env::consts::EXE_SUFFIX));
    if bin.exists() {
        Ok(bin)
    } else {
        Err(io::Error::other(format!("{} not found after build", bin.display())))
    }
}
