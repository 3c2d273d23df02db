use std::path::Path;

use belab_core::corpus::CorpusConfig;
use belab_core::experiment::sweep::SweepSpace;
use belab_core::experiment::PipelineConfig;
use belab_core::tokenizer::BpeConfig;

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_pipeline_config_spells_out_the_defaults() {
    let cfg = PipelineConfig::load(&configs().join("pipeline.toml")).unwrap();
    assert_eq!(cfg.adam, Default::default());
    assert_eq!(cfg.corpus.config, CorpusConfig::default());
    assert_eq!(cfg.tokenizer, BpeConfig::default());
    assert_eq!(cfg.encoder, Default::default());
    assert_eq!(cfg.pretrain, Default::default());
    assert_eq!(cfg.ingest, Default::default());
    assert_eq!(cfg.finetune, Default::default());
    assert_eq!(cfg.audio, Default::default());
    assert_eq!(cfg.fusion, Default::default());
}

#[test]
fn shipped_text_space_matches_the_builtin() {
    let space = SweepSpace::load(&configs().join("sweep_text.toml")).unwrap();
    let builtin = SweepSpace::text_default();
    assert_eq!(space.params.keys().collect::<Vec<_>>(), builtin.params.keys().collect::<Vec<_>>());
    assert_eq!(space.params["batch_size"], builtin.params["batch_size"]);
}
