//! Study-level count data: ingestion, validation, and effect-size transforms.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    /// 1-based index as printed in the source tables.
    pub id: u32,
    pub label: String,
    /// Number of asymptomatic cases, Y_i.
    pub events: u64,
    /// Number of observations, n_i.
    pub trials: u64,
}

impl Study {
    pub fn new(id: u32, label: impl Into<String>, events: u64, trials: u64) -> Result<Self> {
        let study = Study {
            id,
            label: label.into(),
            events,
            trials,
        };
        study.validate()?;
        Ok(study)
    }

    fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::Validation(format!(
                "study {}: trials must be at least 1",
                self.id
            )));
        }
        if self.events > self.trials {
            return Err(Error::Validation(format!(
                "study {}: events {} exceed trials {}",
                self.id, self.events, self.trials
            )));
        }
        Ok(())
    }

    pub fn proportion(&self) -> f64 {
        self.events as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    Proportion,
    LogOdds,
}

impl EffectScale {
    /// Maps a value on the analysis scale back to the probability scale:
    /// identity for proportions, inverse logit for log odds.
    pub fn to_probability(self, x: f64) -> f64 {
        match self {
            EffectScale::Proportion => x,
            EffectScale::LogOdds => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

/// What to do with boundary counts (0 or n events) on the log-odds scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContinuityPolicy {
    /// Fail loudly rather than silently changing the data.
    #[default]
    Reject,
    /// Add 0.5 to events and 1 to trials before transforming.
    Haldane,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSummary {
    /// Observed effect on the chosen scale.
    pub effect: f64,
    /// Plug-in sampling variance of the effect.
    pub variance: f64,
    pub scale: EffectScale,
}

pub fn effect_summary(
    study: &Study,
    scale: EffectScale,
    correction: ContinuityPolicy,
) -> Result<EffectSummary> {
    study.validate()?;
    let (events, trials) = (study.events as f64, study.trials as f64);
    match scale {
        EffectScale::Proportion => {
            let p = events / trials;
            Ok(EffectSummary {
                effect: p,
                variance: p * (1.0 - p) / trials,
                scale,
            })
        }
        EffectScale::LogOdds => {
            let boundary = study.events == 0 || study.events == study.trials;
            let (events, trials) = match (boundary, correction) {
                (false, _) => (events, trials),
                (true, ContinuityPolicy::Haldane) => (events + 0.5, trials + 1.0),
                (true, ContinuityPolicy::Reject) => {
                    return Err(Error::BoundaryCount {
                        study_id: study.id,
                        events: study.events,
                        trials: study.trials,
                    })
                }
            };
            let p = events / trials;
            Ok(EffectSummary {
                effect: (p / (1.0 - p)).ln(),
                variance: 1.0 / (trials * p * (1.0 - p)),
                scale,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySet {
    studies: Vec<Study>,
    scale: EffectScale,
    summaries: Vec<EffectSummary>,
}

impl StudySet {
    pub fn new(
        studies: Vec<Study>,
        scale: EffectScale,
        correction: ContinuityPolicy,
    ) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Validation("a study set needs at least one study".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for study in &studies {
            if !seen.insert(study.id) {
                return Err(Error::Validation(format!("duplicate study id {}", study.id)));
            }
        }
        let summaries = studies
            .iter()
            .map(|s| effect_summary(s, scale, correction))
            .collect::<Result<Vec<_>>>()?;
        Ok(StudySet {
            studies,
            scale,
            summaries,
        })
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn scale(&self) -> EffectScale {
        self.scale
    }

    pub fn studies(&self) -> &[Study] {
        &self.studies
    }

    pub fn summaries(&self) -> &[EffectSummary] {
        &self.summaries
    }

    pub fn effects(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.effect).collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.variance).collect()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.studies.iter().map(|s| s.id).collect()
    }

    pub fn position_of(&self, id: u32) -> Option<usize> {
        self.studies.iter().position(|s| s.id == id)
    }
}

pub const CSV_HEADER: &str = "study_id,label,events,trials";

pub fn load_studies<R: Read>(
    source: R,
    scale: EffectScale,
    correction: ContinuityPolicy,
) -> Result<StudySet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let expected: Vec<&str> = CSV_HEADER.split(',').collect();
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{CSV_HEADER}`, found `{}`", got.join(",")),
            });
        }
    }
    let mut studies = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_int = |i: usize, name: &str| -> Result<u64> {
            field(i).parse().map_err(|_| Error::Parse {
                line,
                message: format!("{name} {:?} is not a nonnegative integer", field(i)),
            })
        };
        let id = parse_int(0, "study_id")? as u32;
        let events = parse_int(2, "events")?;
        let trials = parse_int(3, "trials")?;
        studies.push(Study::new(id, field(1), events, trials)?);
    }
    StudySet::new(studies, scale, correction)
}

pub fn to_csv(set: &StudySet) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in set.studies() {
        out.push_str(&format!("{},{},{},{}\n", s.id, s.label, s.events, s.trials));
    }
    out
}

/// Names of the bundled example datasets of COVID-19 asymptomatic-rate studies.
pub const BUNDLED_NAMES: [&str; 4] = [
    "he2020_five",
    "children_eleven",
    "children_six",
    "screening_seven",
];

const HE2020_FIVE: [(u64, u64); 5] = [(4, 13), (13, 23), (18, 83), (40, 60), (130, 166)];
const CHILDREN_ELEVEN: [(u64, u64); 11] = [
    (94, 728),
    (27, 171),
    (61, 115),
    (10, 36),
    (4, 31),
    (8, 16),
    (8, 14),
    (2, 13),
    (2, 10),
    (1, 9),
    (5, 9),
];
/// Studies 1, 2, 5, 6, 7, 11 of the eleven-study children meta-analysis.
const CHILDREN_SIX_IDS: [u32; 6] = [1, 2, 5, 6, 7, 11];
const SCREENING_SEVEN: [(u64, u64); 7] = [
    (1, 2),
    (2, 4),
    (4, 12),
    (5, 30),
    (12, 44),
    (29, 73),
    (41, 138),
];

pub fn bundled_provenance(name: &str) -> Result<&'static str> {
    match name {
        "he2020_five" => Ok("five COVID-19 asymptomatic-rate studies from the He et al. (2020) review"),
        "children_eleven" => Ok("eleven studies of children from the Viner et al. (2021) review"),
        "children_six" => Ok("subset of children_eleven keeping studies 1, 2, 5, 6, 7, 11"),
        "screening_seven" => Ok("seven population-screening studies from the Buitrago-Garcia et al. (2020) review"),
        _ => Err(Error::NotFound {
            name: name.to_string(),
            valid: BUNDLED_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}

pub fn bundled_dataset(name: &str, scale: EffectScale) -> Result<StudySet> {
    let make = |counts: &[(u64, u64)], ids: Option<&[u32]>| -> Result<StudySet> {
        let studies = counts
            .iter()
            .enumerate()
            .map(|(i, &(events, trials))| {
                let id = ids.map_or(i as u32 + 1, |ids| ids[i]);
                Study::new(id, format!("study {id}"), events, trials)
            })
            .collect::<Result<Vec<_>>>()?;
        StudySet::new(studies, scale, ContinuityPolicy::Reject)
    };
    match name {
        "he2020_five" => make(&HE2020_FIVE, None),
        "children_eleven" => make(&CHILDREN_ELEVEN, None),
        "children_six" => {
            let counts: Vec<(u64, u64)> = CHILDREN_SIX_IDS
                .iter()
                .map(|&id| CHILDREN_ELEVEN[id as usize - 1])
                .collect();
            make(&counts, Some(&CHILDREN_SIX_IDS))
        }
        "screening_seven" => make(&SCREENING_SEVEN, None),
        _ => Err(Error::NotFound {
            name: name.to_string(),
            valid: BUNDLED_NAMES.iter().map(|s| s.to_string()).collect(),
        }),
    }
}
