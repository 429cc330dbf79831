//! Cohorts: generation, on-disk container, splits, and conversion to model inputs.

pub mod container;
pub mod generate;
pub mod split;

pub use container::{load_cohort, save_cohort};
pub use generate::{generate_cohort, CohortSpec};
pub use split::{split, Split};

use crate::encoders::text::{TokenSequence, Vocab};
use crate::encoders::{ExpressionBinner, FeatureBag, PathwayPartition};
use crate::error::Result;
use crate::model::SampleInput;
use crate::numerics::Tensor;
use crate::tasks::SurvivalLabel;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub class: usize,
    /// Generator latent, kept for oracle evaluation only.
    pub latent: Vec<f64>,
    pub mutation: bool,
    pub survival: SurvivalLabel,
    pub slide: Option<Tensor>,
    pub genes: Option<Vec<f64>>,
    /// Whether the report is an input modality; the report ids stay
    /// available as a generation target either way.
    pub text_present: bool,
    /// Report word ids ending in END (may be empty).
    pub report: Vec<usize>,
}

impl SampleRecord {
    pub fn present(&self) -> [bool; 3] {
        [self.slide.is_some(), self.genes.is_some(), self.text_present]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub vocab: Vocab,
    pub class_names: Vec<String>,
    pub partition: PathwayPartition,
    pub records: Vec<SampleRecord>,
}

/// A record converted to encoder inputs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bag: Option<FeatureBag>,
    pub bins: Option<Vec<usize>>,
    pub text: Option<TokenSequence>,
    pub report: Vec<usize>,
    pub class: usize,
    pub mutation: bool,
    pub survival: SurvivalLabel,
    pub latent: Vec<f64>,
}

impl Prepared {
    pub fn present(&self) -> [bool; 3] {
        [self.bag.is_some(), self.bins.is_some(), self.text.is_some()]
    }

    /// Unmasked model input restricted to the modalities in `keep`.
    pub fn input(&self, keep: [bool; 3]) -> SampleInput<'_> {
        SampleInput {
            slide: self.bag.as_ref().filter(|_| keep[0]),
            slide_mask: None,
            gene_bins: self.bins.clone().filter(|_| keep[1]),
            text: self.text.clone().filter(|_| keep[2]),
        }
    }

    pub fn full_input(&self) -> SampleInput<'_> {
        self.input([true; 3])
    }
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.class).collect()
    }

    /// Expression binner fitted on the gene values of `indices`.
    pub fn fit_binner(&self, indices: &[usize], n_bins: usize) -> Result<ExpressionBinner> {
        ExpressionBinner::fit(indices.iter().filter_map(|&i| self.records[i].genes.as_ref()).flatten(), n_bins)
    }

    pub fn prepare(&self, binner: &ExpressionBinner) -> Result<Vec<Prepared>> {
        self.records.iter().map(|r| self.prepare_record(r, binner)).collect()
    }

    pub fn prepare_record(&self, r: &SampleRecord, binner: &ExpressionBinner) -> Result<Prepared> {
        Ok(Prepared {
            bag: r.slide.clone().map(FeatureBag::new).transpose()?,
            bins: r.genes.as_ref().map(|v| binner.bin_all(v)),
            text: if r.text_present { Some(TokenSequence::from_words(&r.report, self.spec.text_len)?) } else { None },
            report: r.report.clone(),
            class: r.class,
            mutation: r.mutation,
            survival: r.survival,
            latent: r.latent.clone(),
        })
    }
}
