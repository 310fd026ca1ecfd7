//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use cguda::config::Config;

/// A configuration small enough to run every stage in well under a second.
pub fn tiny_config(seed: u64) -> Config {
    let mut c = Config::default();
    c.data.source_speakers = 6;
    c.data.target_speakers = 4;
    c.data.utts_per_speaker = 5;
    c.data.d_in = 8;
    c.data.target_trials = 20;
    c.data.nontarget_trials = 20;
    // Wide enough that no input silences a whole ReLU layer at init.
    c.model.hidden_dim = 16;
    c.model.emb_dim = 4;
    c.train.seed = seed;
    c.train.pretrain_epochs = 2;
    c.train.finetune_max_epochs = 4;
    c.train.final_epochs = 2;
    c.train.batch_supervised = 8;
    c.train.batch_csl = 6;
    c.cluster.k = 4;
    c.cluster.recluster_period = 2;
    c.cluster.n_init = 2;
    c
}

pub fn write_config(cfg: &Config, path: &Path) {
    std::fs::write(path, cfg.to_toml_string()).unwrap();
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
