//! `synth`: quality-varying vMF templates split into a training set and a
//! disjoint-subject test set with verification and identification protocols.

use std::path::{Path, PathBuf};

use clap::Args;
use crystal_core::aggregation::Template;
use crystal_core::eval::{Pair, PairLabel, PairProtocol};
use crystal_core::io::{self, FeatureDataset};
use crystal_core::vmf::{make_quality_templates, QualityTemplateConfig};
use crystal_core::{Error, Result};

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub train_subjects: usize,
    #[arg(long, default_value_t = 20)]
    pub test_subjects: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub templates_per_subject: usize,
    #[arg(long, default_value_t = 6)]
    pub items_per_template: usize,
    #[arg(long, default_value_t = 2)]
    pub media_per_template: usize,
    /// Every n-th test subject is left out of `gallery_open.txt`.
    #[arg(long, default_value_t = 5)]
    pub open_set_every: usize,
}

impl SynthArgs {
    pub fn with_out(out: &Path) -> Self {
        SynthArgs {
            out: out.to_path_buf(),
            seed: 0,
            train_subjects: 20,
            test_subjects: 20,
            dim: 32,
            templates_per_subject: 3,
            items_per_template: 6,
            media_per_template: 2,
            open_set_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub train_rows: usize,
    pub test_templates: usize,
    pub pairs: usize,
}

/// All unordered template pairs, labelled by subject identity.
pub fn all_pairs(templates: &[Template]) -> PairProtocol {
    let mut pairs = Vec::new();
    for (i, a) in templates.iter().enumerate() {
        for b in &templates[i + 1..] {
            pairs.push(Pair {
                template1: a.template_id().to_string(),
                template2: b.template_id().to_string(),
                label: if a.subject_id() == b.subject_id() {
                    PairLabel::Match
                } else {
                    PairLabel::Nonmatch
                },
            });
        }
    }
    PairProtocol { pairs }
}

pub fn generate(args: &SynthArgs) -> Result<SynthSummary> {
    if args.train_subjects < 2 || args.test_subjects < 2 {
        return Err(Error::InvalidConfig(
            "train and test sets need at least 2 subjects each".into(),
        ));
    }
    if args.open_set_every < 2 {
        return Err(Error::InvalidConfig(
            "open_set_every must be at least 2".into(),
        ));
    }
    let config = QualityTemplateConfig {
        subjects: args.train_subjects + args.test_subjects,
        dim: args.dim,
        templates_per_subject: args.templates_per_subject,
        items_per_template: args.items_per_template,
        media_per_template: args.media_per_template,
        seed: args.seed,
        ..QualityTemplateConfig::default()
    };
    let templates = make_quality_templates(&config)?;
    let split = args.train_subjects * args.templates_per_subject;
    let (train, test) = templates.split_at(split);

    let train_ds = FeatureDataset::from_templates(train)?;
    let test_ds = FeatureDataset::from_templates(test)?;
    io::write_feature_csv(&args.out.join("train.csv"), &train_ds)?;
    io::write_feature_csv(&args.out.join("test.csv"), &test_ds)?;

    let pairs = all_pairs(test);
    io::write_pair_protocol(&args.out.join("pairs.csv"), &pairs)?;

    let mut gallery = Vec::new();
    let mut gallery_open = Vec::new();
    let mut probes = Vec::new();
    for (k, chunk) in test.chunks(args.templates_per_subject).enumerate() {
        let first = chunk[0].template_id().to_string();
        if k % args.open_set_every != args.open_set_every - 1 {
            gallery_open.push(first.clone());
        }
        gallery.push(first);
        probes.extend(chunk[1..].iter().map(|t| t.template_id().to_string()));
    }
    io::write_id_list(&args.out.join("gallery.txt"), &gallery)?;
    io::write_id_list(&args.out.join("gallery_open.txt"), &gallery_open)?;
    io::write_id_list(&args.out.join("probes.txt"), &probes)?;

    Ok(SynthSummary {
        train_rows: train_ds.len(),
        test_templates: test.len(),
        pairs: pairs.pairs.len(),
    })
}
