use std::path::Path;

use bevgen_cli::RunConfig;

fn preset(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn desk_preset_is_the_default() {
    assert_eq!(preset("desk.toml").echo(), RunConfig::default().echo());
}

#[test]
fn large_preset_overrides_model_and_optimizer() {
    let c = preset("large.toml");
    assert_eq!(
        (c.layers, c.heads, c.image_codebook, c.code_dim),
        (24, 16, 1024, 256)
    );
    assert_eq!((c.lr, c.clip, c.density, c.window), (5e-7, 50.0, 0.35, 96));
    assert_eq!(c.attention, "sparse");
    assert_eq!(c.scenes, RunConfig::default().scenes);
}
