use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ClassProfile, Domain, Label, LabeledExample};
use crate::error::{PasclError, Result};

fn data_err(e: impl std::fmt::Display) -> PasclError {
    PasclError::Data(e.to_string())
}

/// Writes `feat_0,...,feat_{d-1},label,domain,tail` rows; reals carry 17
/// significant digits so a read gives back the exact same bits.
pub fn write_examples_csv<W: Write>(writer: W, examples: &[LabeledExample], dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..dim).map(|i| format!("feat_{i}")).collect();
    header.extend(["label", "domain", "tail"].map(String::from));
    w.write_record(&header).map_err(data_err)?;
    for ex in examples {
        if ex.features.len() != dim {
            return Err(PasclError::Data(format!(
                "example has {} features, expected {dim}",
                ex.features.len()
            )));
        }
        let mut row: Vec<String> = ex.features.iter().map(|v| format!("{v:.16e}")).collect();
        row.push(match ex.label {
            Label::Class(c) => c.to_string(),
            Label::Ood => "OOD".into(),
        });
        row.push(match ex.domain {
            Domain::In => "IN".into(),
            Domain::Out => "OUT".into(),
        });
        row.push(if ex.tail { "1" } else { "0" }.into());
        w.write_record(&row).map_err(data_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses the format written by [`write_examples_csv`].
pub fn read_examples_csv<R: Read>(reader: R) -> Result<Vec<LabeledExample>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers().map_err(data_err)?.clone();
    let n = header.len();
    if n < 4 || &header[n - 3] != "label" || &header[n - 2] != "domain" || &header[n - 1] != "tail" {
        return Err(PasclError::Data("unexpected dataset header".into()));
    }
    let dim = n - 3;
    for (i, h) in header.iter().take(dim).enumerate() {
        if h != format!("feat_{i}") {
            return Err(PasclError::Data(format!("unexpected column {h:?}")));
        }
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(data_err)?;
        let bad = |what: &str| PasclError::Data(format!("row {}: {what}", line + 2));
        let features = (0..dim)
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad("unparsable feature")))
            .collect::<Result<Vec<_>>>()?;
        let label = match &rec[dim] {
            "OOD" => Label::Ood,
            s => Label::Class(s.parse().map_err(|_| bad("unparsable label"))?),
        };
        let domain = match &rec[dim + 1] {
            "IN" => Domain::In,
            "OUT" => Domain::Out,
            _ => return Err(bad("domain must be IN or OUT")),
        };
        let tail = match &rec[dim + 2] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("tail must be 0 or 1")),
        };
        let consistent = match domain {
            Domain::Out => label == Label::Ood && !tail,
            Domain::In => label != Label::Ood,
        };
        if !consistent {
            return Err(bad("label, domain and tail flag disagree"));
        }
        out.push(LabeledExample { features, label, domain, tail });
    }
    Ok(out)
}

/// Serialized class profile written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub format_version: u32,
    pub counts: Vec<usize>,
    pub priors: Vec<f64>,
    pub tail_set: Vec<usize>,
    pub tail_fraction: f64,
    pub requested_rho: f64,
    pub realized_rho: f64,
}

impl ProfileSummary {
    pub const VERSION: u32 = 1;

    pub fn new(profile: &ClassProfile, tail_fraction: f64, requested_rho: f64) -> Self {
        Self {
            format_version: Self::VERSION,
            counts: profile.counts.clone(),
            priors: profile.priors.clone(),
            tail_set: profile.tail_set.iter().copied().collect(),
            tail_fraction,
            requested_rho,
            realized_rho: profile.realized_rho(),
        }
    }

    pub fn to_profile(&self) -> Result<ClassProfile> {
        if self.format_version != Self::VERSION {
            return Err(PasclError::Data(format!(
                "profile format version {} is not supported",
                self.format_version
            )));
        }
        let mut profile = ClassProfile::new(self.counts.clone(), self.tail_fraction)?;
        let tail: BTreeSet<usize> = self.tail_set.iter().copied().collect();
        if tail != profile.tail_set {
            return Err(PasclError::Data("profile tail set disagrees with its counts".into()));
        }
        profile.priors = self.priors.clone();
        Ok(profile)
    }
}
