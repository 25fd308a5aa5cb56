#![allow(dead_code)]

use patchmerge::RunConfig;

/// A configuration small enough to train in a second or two.
pub fn tiny() -> RunConfig {
    let mut c = RunConfig::default();
    c.corpus.width = 32;
    c.corpus.height = 32;
    c.corpus.thing_size_min = 8;
    c.corpus.thing_size_max = 14;
    c.corpus.clip_dim = 8;
    c.corpus.train_scenes = 8;
    c.corpus.eval_scenes = 4;
    c.model.dim = 16;
    c.model.heads = 2;
    c.model.encoder_layers = 1;
    c.model.decoder_stages = 2;
    c.model.ffn_dim = 16;
    c.model.roi_size = 3;
    c.model.affinity_heads = 2;
    c.train.epochs = 2;
    c.train.batch_size = 3;
    c
}
