//! Scene corpus and the frozen evaluation renders used by the probe.

use std::fs;
use std::path::Path;

use crate::augment::{canonical_view, View};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{forward, EncoderParams, FeatureMatrix, Head};
use crate::rng;
use crate::scene::{generate_scene, Scene};

use super::config::CorpusConfig;
use super::inputs::{plain_block, Neighborhoods, ViewTables};

/// Offset separating test-scene seeds from train-scene seeds.
pub const TEST_SEED_OFFSET: u64 = 1000;

/// Train and test scenes; the split is by scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        let make = |offset: u64, n: usize| -> Result<Vec<Scene>> {
            (0..n as u64)
                .map(|i| generate_scene(rng::derive(cfg.seed, offset + i), &cfg.scene))
                .collect()
        };
        Ok(Self {
            train: make(0, cfg.train_scenes)?,
            test: make(TEST_SEED_OFFSET, cfg.test_scenes)?,
        })
    }

    /// Writes `train/NNN.scn` and `test/NNN.scn` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (split, scenes) in [("train", &self.train), ("test", &self.test)] {
            let d = dir.join(split);
            fs::create_dir_all(&d)?;
            for (i, s) in scenes.iter().enumerate() {
                io::save_scene(&d.join(format!("{i:03}.scn")), s)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |split: &str| -> Result<Vec<Scene>> {
            let d = dir.join(split);
            let mut paths: Vec<_> = fs::read_dir(&d)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            paths.retain(|p| p.extension().is_some_and(|x| x == "scn"));
            paths.sort();
            if paths.is_empty() {
                return Err(Error::Format(format!("no .scn files in {}", d.display())));
            }
            paths.iter().map(|p| io::load_scene(p)).collect()
        };
        Ok(Self {
            train: read("train")?,
            test: read("test")?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.train
            .iter()
            .chain(&self.test)
            .map(|s| s.num_classes)
            .max()
            .unwrap_or(0)
    }
}

/// Canonical render of one scene with the visible points as queries and
/// their neighbourhoods precomputed.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub view: View,
    pub queries: Vec<usize>,
    pub labels: Vec<u32>,
    pub nb: Neighborhoods,
}

impl EvalScene {
    pub fn new(scene: &Scene, image_size: usize, knn_k: usize) -> Self {
        let view = canonical_view(scene, image_size);
        let queries: Vec<usize> = (0..scene.len()).filter(|&i| view.pixel_of[i].is_some()).collect();
        let labels = queries.iter().map(|&i| scene.labels[i]).collect();
        let nb = Neighborhoods::compute(&view, &queries, knn_k, true);
        Self {
            view,
            queries,
            labels,
            nb,
        }
    }

    /// Frozen fused features of every query.
    pub fn features(&self, params: &EncoderParams) -> Result<FeatureMatrix> {
        let tables = ViewTables::new(&self.view, params.fusion);
        let block = plain_block(&tables, &self.queries, &self.nb);
        Ok(forward(params, &block, Head::Fused)?.0)
    }
}

/// Evaluation renders of both splits.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub train: Vec<EvalScene>,
    pub test: Vec<EvalScene>,
    pub num_classes: usize,
    pub knn_k: usize,
}

impl EvalSet {
    pub fn new(corpus: &Corpus, image_size: usize, knn_k: usize) -> Self {
        let build = |ss: &[Scene]| ss.iter().map(|s| EvalScene::new(s, image_size, knn_k)).collect();
        Self {
            train: build(&corpus.train),
            test: build(&corpus.test),
            num_classes: corpus.num_classes(),
            knn_k,
        }
    }

    /// Stacked features and labels of one split.
    pub fn split_features(&self, params: &EncoderParams, test: bool) -> Result<(FeatureMatrix, Vec<u32>)> {
        if params.knn_k != self.knn_k {
            return Err(Error::Shape(format!(
                "encoder expects k={} but eval neighbourhoods use k={}",
                params.knn_k, self.knn_k
            )));
        }
        let scenes = if test { &self.test } else { &self.train };
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut cols = params.out_dim();
        for s in scenes {
            let f = s.features(params)?;
            cols = f.cols;
            data.extend_from_slice(&f.data);
            labels.extend_from_slice(&s.labels);
        }
        Ok((
            FeatureMatrix {
                rows: labels.len(),
                cols,
                data,
            },
            labels,
        ))
    }
}
