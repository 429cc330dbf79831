//! Cohort container.
//!
//! ```text
//! magic "ALTERCOH" | version u32 | total length u64
//! header length u64 | header JSON (spec, vocabulary, class names, pathways, record count)
//! per record:
//!   id u64 | class u32 | flags u8 (slide, genes, text, censored, mutation)
//!   time f64 | latent: u32 count + f64s
//!   [slide: u32 rows, u32 cols, f64s] [genes: u32 count + f64s]
//!   report: u32 count + u32 ids
//! CRC32 of everything above, u32
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cohort, CohortSpec, SampleRecord};
use crate::encoders::text::Vocab;
use crate::encoders::PathwayPartition;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::SurvivalLabel;

const MAGIC: &[u8; 8] = b"ALTERCOH";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;

const F_SLIDE: u8 = 1;
const F_GENES: u8 = 2;
const F_TEXT: u8 = 4;
const F_CENSORED: u8 = 8;
const F_MUTATION: u8 = 16;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: CohortSpec,
    vocab: Vocab,
    class_names: Vec<String>,
    pathways: Vec<Vec<usize>>,
    n_records: usize,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the container")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

pub fn encode_cohort(cohort: &Cohort) -> Result<Vec<u8>> {
    let header = Header {
        spec: cohort.spec.clone(),
        vocab: cohort.vocab.clone(),
        class_names: cohort.class_names.clone(),
        pathways: cohort.partition.groups().to_vec(),
        n_records: cohort.records.len(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for r in &cohort.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        put_len(&mut out, r.class)?;
        let mut flags = 0;
        for (set, bit) in [
            (r.slide.is_some(), F_SLIDE),
            (r.genes.is_some(), F_GENES),
            (r.text_present, F_TEXT),
            (r.survival.censored, F_CENSORED),
            (r.mutation, F_MUTATION),
        ] {
            if set {
                flags |= bit;
            }
        }
        out.push(flags);
        out.extend_from_slice(&r.survival.time.to_le_bytes());
        put_len(&mut out, r.latent.len())?;
        put_f64s(&mut out, &r.latent);
        if let Some(s) = &r.slide {
            put_len(&mut out, s.rows())?;
            put_len(&mut out, s.cols())?;
            put_f64s(&mut out, s.data());
        }
        if let Some(g) = &r.genes {
            put_len(&mut out, g.len())?;
            put_f64s(&mut out, g);
        }
        put_len(&mut out, r.report.len())?;
        for &id in &r.report {
            put_len(&mut out, id)?;
        }
    }
    let total = (out.len() + 4) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("cohort container ends inside {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format(format!("{what} length overflows")))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_cohort(bytes: &[u8]) -> Result<Cohort> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a cohort container (bad magic)".into()));
    }
    if bytes.len() < PREAMBLE {
        return Err(Error::Truncated("cohort container preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let total = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if (bytes.len() as u64) < total {
        return Err(Error::Truncated(format!("cohort container holds {} of {total} bytes", bytes.len())));
    }
    if bytes.len() as u64 != total || total < PREAMBLE as u64 + 4 {
        return Err(Error::Format(format!("cohort container length {} does not match its preamble ({total})", bytes.len())));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut rd = Reader { buf: body, pos: PREAMBLE };
    let hlen = rd.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(rd.take(hlen, "header")?)?;
    header.spec.validate()?;
    let partition = PathwayPartition::new(header.spec.n_genes, header.pathways)?;
    let mut records = Vec::with_capacity(header.n_records.min(1 << 20));
    for _ in 0..header.n_records {
        let id = rd.u64("record id")?;
        let class = rd.u32("class")?;
        let flags = rd.u8("flags")?;
        let time = rd.f64("survival time")?;
        let nl = rd.u32("latent length")?;
        let latent = rd.f64s(nl, "latent")?;
        let slide = if flags & F_SLIDE != 0 {
            let (r, c) = (rd.u32("slide rows")?, rd.u32("slide cols")?);
            Some(Tensor::new(&[r, c], rd.f64s(r * c, "slide features")?)?)
        } else {
            None
        };
        let genes = if flags & F_GENES != 0 {
            let n = rd.u32("gene count")?;
            Some(rd.f64s(n, "gene values")?)
        } else {
            None
        };
        let nr = rd.u32("report length")?;
        let report = (0..nr).map(|_| rd.u32("report ids")).collect::<Result<Vec<_>>>()?;
        if class >= header.spec.classes || report.iter().any(|&t| t >= header.vocab.len()) {
            return Err(Error::Format(format!("record {id} has an out-of-range class or token")));
        }
        records.push(SampleRecord {
            id,
            class,
            latent,
            mutation: flags & F_MUTATION != 0,
            survival: SurvivalLabel { time, censored: flags & F_CENSORED != 0 },
            slide,
            genes,
            text_present: flags & F_TEXT != 0,
            report,
        });
    }
    if rd.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last record", body.len() - rd.pos)));
    }
    Ok(Cohort { spec: header.spec, vocab: header.vocab, class_names: header.class_names, partition, records })
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cohort(cohort)?)?;
    Ok(())
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort> {
    decode_cohort(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_cohort;

    fn small() -> Cohort {
        let spec = CohortSpec { n: 12, missing: [0.3, 0.3, 0.3], ..CohortSpec::default() };
        generate_cohort(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let c = small();
        let bytes = encode_cohort(&c).unwrap();
        let back = decode_cohort(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_cohort(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_report_without_text_round_trips() {
        let mut c = small();
        c.records[0].text_present = false;
        c.records[0].report.clear();
        let back = decode_cohort(&encode_cohort(&c).unwrap()).unwrap();
        assert!(back.records[0].report.is_empty());
        assert!(!back.records[0].present()[2]);
    }

    #[test]
    fn corruption_truncation_and_version() {
        let bytes = encode_cohort(&small()).unwrap();
        let mut bad = bytes.clone();
        let k = bad.len() - 40;
        bad[k] ^= 0x01;
        assert!(matches!(decode_cohort(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(decode_cohort(&bytes[..bytes.len() - 9]), Err(Error::Truncated(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(decode_cohort(&v2), Err(Error::Version { found: 2, expected: 1 })));
    }
}
