//! Synthetic cohorts with planted cross-modal structure.
//!
//! Every sample draws a class `k` and a standard-normal latent `z`. All
//! three modalities read out `z` (patches linearly, genes through a sparse
//! rectified loading, the report through quantized level words), so
//! cross-modal retrieval has a ground truth. Survival is exponential with
//! log-rate proportional to `z[0]`; the mutation label is `z[1] > 0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::text::{Vocab, END, N_SPECIAL};
use crate::encoders::PathwayPartition;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::SurvivalLabel;

use super::{Cohort, SampleRecord};

/// Patch mixture components per class.
const COMPONENTS: usize = 3;
/// Quantization levels per latent coordinate in the report.
pub const REPORT_LEVELS: usize = 8;
/// Standard-normal octile cut points, so the eight levels are equiprobable.
const OCTILES: [f64; 7] = [-1.150_349_380_376_008, -0.674_489_750_196_081_7, -0.318_639_363_964_375_2, 0.0, 0.318_639_363_964_375_2, 0.674_489_750_196_081_7, 1.150_349_380_376_008];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n: usize,
    pub classes: usize,
    pub latent_dim: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub n_genes: usize,
    pub pathway_size: usize,
    /// Text sequence length including the leading CLS.
    pub text_len: usize,
    pub vocab_size: usize,
    /// Drop probabilities for slide, genes, text.
    pub missing: [f64; 3],
    pub noise: f64,
    pub censor_rate: f64,
    /// Log-hazard per unit of `z[0]`.
    pub risk_scale: f64,
    /// Latent coordinates spelled out in the report (0 = class-only reports).
    pub report_levels: usize,
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n: 512,
            classes: 4,
            latent_dim: 4,
            n_patches: 16,
            patch_dim: 32,
            n_genes: 24,
            pathway_size: 4,
            text_len: 12,
            vocab_size: 64,
            missing: [0.0; 3],
            noise: 0.1,
            censor_rate: 0.3,
            risk_scale: 15.0,
            report_levels: 4,
            seed: 0,
        }
    }
}

impl CohortSpec {
    /// Words the generator needs: class, template and level words.
    fn n_words(&self) -> usize {
        self.classes * 3 + self.report_levels * REPORT_LEVELS
    }

    /// Report length including END.
    pub fn report_len(&self) -> usize {
        2 + self.report_levels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n == 0 {
            return bad("cohort needs at least one sample".into());
        }
        if self.classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.latent_dim < 2 {
            return bad("latent width must be at least 2 (risk and mutation coordinates)".into());
        }
        if self.n_patches == 0 || self.patch_dim == 0 || self.n_genes == 0 || self.pathway_size == 0 {
            return bad("patch count, patch width, gene count and pathway size must be positive".into());
        }
        if self.report_levels > self.latent_dim {
            return bad(format!("report_levels {} exceeds latent width {}", self.report_levels, self.latent_dim));
        }
        if N_SPECIAL + self.n_words() > self.vocab_size {
            return bad(format!("vocabulary of {} cannot hold {} report words", self.vocab_size, self.n_words()));
        }
        if self.text_len < 1 + self.report_len() {
            return bad(format!("text length {} cannot hold CLS plus a {}-token report", self.text_len, self.report_len()));
        }
        if self.missing.iter().any(|&m| !(0.0..1.0).contains(&m)) {
            return bad("missing rates must lie in [0, 1)".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.censor_rate) {
            return bad("censoring rate must lie in [0, 1)".into());
        }
        if !self.risk_scale.is_finite() {
            return bad("risk scale must be finite".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        let mut words = Vec::new();
        for k in 0..self.classes {
            words.push(format!("class{k}"));
        }
        for k in 0..self.classes {
            words.push(format!("pattern{k}a"));
            words.push(format!("pattern{k}b"));
        }
        for c in 0..self.report_levels {
            for l in 0..REPORT_LEVELS {
                words.push(format!("z{c}level{l}"));
            }
        }
        let mut filler = 0;
        while N_SPECIAL + words.len() < self.vocab_size {
            words.push(format!("unused{filler}"));
            filler += 1;
        }
        Vocab::new(words).expect("generated words are distinct")
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.classes).map(|k| format!("class{k}")).collect()
    }
}

/// Equiprobable level of a standard-normal value.
pub fn latent_level(v: f64) -> usize {
    OCTILES.iter().filter(|&&c| v >= c).count()
}

/// Report word ids (ending in END) for a class and latent.
pub fn report_for(spec: &CohortSpec, class: usize, z: &[f64]) -> Vec<usize> {
    let k = spec.classes;
    let mut ids = vec![N_SPECIAL + class, N_SPECIAL + k + 2 * class + usize::from(z[1] <= 0.0)];
    for (c, &v) in z.iter().enumerate().take(spec.report_levels) {
        ids.push(N_SPECIAL + 3 * k + c * REPORT_LEVELS + latent_level(v));
    }
    ids.push(END);
    ids
}

/// Cohort-wide generative parameters.
struct World {
    prototypes: Vec<Vec<f64>>,
    components: Vec<Vec<Vec<f64>>>,
    /// `patch_dim × latent_dim`.
    patch_loading: Vec<Vec<f64>>,
    /// `n_genes × latent_dim`, one or two nonzeros per row.
    gene_loading: Vec<Vec<f64>>,
    gene_class: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * normal(rng)).collect()
}

impl World {
    fn draw(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Self {
        let (k, w, l) = (spec.classes, spec.patch_dim, spec.latent_dim);
        let prototypes = (0..k).map(|_| normals(rng, w, 1.0)).collect();
        let components = (0..k).map(|_| (0..COMPONENTS).map(|_| normals(rng, w, 0.5)).collect()).collect();
        let patch_loading = (0..w).map(|_| normals(rng, l, 0.5)).collect();
        let gene_loading = (0..spec.n_genes)
            .map(|g| {
                let mut row = vec![0.0; l];
                let sign = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                row[g % l] = sign(rng) * rng.random_range(0.6..1.0);
                if rng.random_bool(0.5) {
                    let c = rng.random_range(0..l);
                    row[c] += sign(rng) * rng.random_range(0.2..0.5);
                }
                row
            })
            .collect();
        let gene_class = (0..k).map(|_| normals(rng, spec.n_genes, 0.4)).collect();
        World { prototypes, components, patch_loading, gene_loading, gene_class }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-sample generator stream: sample `i` never depends on other samples.
fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let world = World::draw(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed));
    let records = (0..spec.n).map(|i| generate_record(spec, &world, i)).collect::<Result<_>>()?;
    Ok(Cohort {
        spec: spec.clone(),
        vocab: spec.vocab(),
        class_names: spec.class_names(),
        partition: PathwayPartition::contiguous(spec.n_genes, spec.pathway_size)?,
        records,
    })
}

fn generate_record(spec: &CohortSpec, world: &World, i: usize) -> Result<SampleRecord> {
    let mut rng = sample_rng(spec.seed, i);
    let class = rng.random_range(0..spec.classes);
    let z = normals(&mut rng, spec.latent_dim, 1.0);

    let shift: Vec<f64> = world.patch_loading.iter().map(|row| dot(row, &z)).collect();
    let mut patches = Vec::with_capacity(spec.n_patches * spec.patch_dim);
    for _ in 0..spec.n_patches {
        let comp = &world.components[class][rng.random_range(0..COMPONENTS)];
        for j in 0..spec.patch_dim {
            patches.push(world.prototypes[class][j] + comp[j] + shift[j] + spec.noise * normal(&mut rng));
        }
    }
    let genes: Vec<f64> = (0..spec.n_genes)
        .map(|g| {
            let v = 1.5 + dot(&world.gene_loading[g], &z) + world.gene_class[class][g] + spec.noise * normal(&mut rng);
            v.max(0.0)
        })
        .collect();

    let rate = (spec.risk_scale * z[0]).exp();
    // Inverse CDF; u ∈ [0, 1) keeps ln(1 − u) finite.
    let event = -(-rng.random::<f64>()).ln_1p() / rate;
    let censored = rng.random_bool(spec.censor_rate);
    let time = if censored { event * rng.random::<f64>() } else { event };

    let present = loop {
        let keep = spec.missing.map(|m| !rng.random_bool(m));
        if keep.iter().any(|&k| k) {
            break keep;
        }
    };
    let report = report_for(spec, class, &z);
    Ok(SampleRecord {
        id: i as u64,
        class,
        mutation: z[1] > 0.0,
        survival: SurvivalLabel { time, censored },
        slide: present[0].then(|| Tensor::new(&[spec.n_patches, spec.patch_dim], patches)).transpose()?,
        genes: present[1].then_some(genes),
        text_present: present[2],
        report,
        latent: z,
    })
}
