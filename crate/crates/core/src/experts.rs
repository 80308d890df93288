//! Mock experts standing in for frozen encoders.
//!
//! An expert maps a request to a fixed-width hidden vector. The mock builds
//! that vector in a private latent frame and rotates it into the output
//! space with a per-expert orthonormal basis:
//!
//! * a relevance axis carrying `signal_gain · skill[nation] · e(q, t)`, where
//!   `e = +1` when the hashed token sets of query and title intersect and
//!   `-1` otherwise;
//! * one axis per nation carrying a constant language-identity offset;
//! * Gaussian noise on every axis, with a few high-variance "spike" axes.
//!
//! Noise is seeded from `(expert seed, query, title, nation)`, so a forward
//! pass is a pure function of its inputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{hash_bytes, random_orthonormal, Matrix, Rng};

/// A (query, item title, nation) triple.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub query: String,
    pub title: String,
    pub nation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub id: usize,
    pub name: String,
    pub hidden_dim: usize,
    /// Nation code to skill in `[0, 1]`.
    pub skill: BTreeMap<String, f64>,
    pub base_latency_us: u64,
    pub per_item_latency_us: u64,
    pub seed: u64,
}

/// Shape of the synthetic hidden states, shared by all mock experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalModel {
    /// Amplitude of the relevance axis at skill 1.
    pub signal_gain: f64,
    /// Standard deviation of the isotropic noise.
    pub noise_scale: f64,
    /// Amplitude of the language-identity offset.
    pub nation_gain: f64,
    /// Number of high-variance noise axes.
    pub spike_count: usize,
    /// Standard-deviation multiplier on the spike axes.
    pub spike_scale: f64,
}

impl Default for SignalModel {
    fn default() -> Self {
        Self {
            signal_gain: 1.0,
            noise_scale: 1.0,
            nation_gain: 2.0,
            spike_count: 2,
            spike_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert_id: usize,
    pub hidden: Vec<f64>,
}

/// Text-level relevance evidence: `+1` if query and title share a token
/// (compared by 64-bit token hash), `-1` otherwise.
pub fn relevance_evidence(query: &str, title: &str) -> f64 {
    let hashed = |s: &str| -> BTreeSet<u64> {
        s.split_whitespace()
            .map(|tok| hash_bytes(0x5eed, tok.to_lowercase().as_bytes()))
            .collect()
    };
    let q = hashed(query);
    if q.is_empty() {
        return -1.0;
    }
    let t = hashed(title);
    if q.intersection(&t).next().is_some() {
        1.0
    } else {
        -1.0
    }
}

/// A mock expert with its rotation precomputed.
#[derive(Debug, Clone)]
pub struct MockExpert {
    profile: ExpertProfile,
    signal: SignalModel,
    /// Columns are latent axes expressed in output coordinates.
    basis: Matrix,
    noise_std: Vec<f64>,
    relevance_axis: usize,
    nation_axes: BTreeMap<String, usize>,
}

impl MockExpert {
    pub fn new(profile: ExpertProfile, signal: SignalModel) -> Result<Self> {
        let d = profile.hidden_dim;
        let needed = signal.spike_count + profile.skill.len() + 1;
        if d == 0 || d < needed {
            return Err(Error::Config(format!(
                "expert `{}`: hidden_dim {} is below the {} latent axes it must carry",
                profile.name, d, needed
            )));
        }
        for (nation, &s) in &profile.skill {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Config(format!(
                    "expert `{}`: skill for {nation} is {s}, outside [0, 1]",
                    profile.name
                )));
            }
        }
        let mut rng = Rng::derive(profile.seed, 0xba515);
        let basis = random_orthonormal(d, &mut rng);
        let noise_std = (0..d)
            .map(|j| {
                if j < signal.spike_count {
                    signal.noise_scale * signal.spike_scale
                } else {
                    signal.noise_scale
                }
            })
            .collect();
        let nation_axes = profile
            .skill
            .keys()
            .enumerate()
            .map(|(i, n)| (n.clone(), signal.spike_count + i))
            .collect();
        Ok(Self {
            relevance_axis: d - 1,
            profile,
            signal,
            basis,
            noise_std,
            nation_axes,
        })
    }

    pub fn profile(&self) -> &ExpertProfile {
        &self.profile
    }

    pub fn id(&self) -> usize {
        self.profile.id
    }

    pub fn hidden_dim(&self) -> usize {
        self.profile.hidden_dim
    }

    /// Unit vector of the relevance axis in output coordinates.
    pub fn relevance_direction(&self) -> Vec<f64> {
        (0..self.hidden_dim())
            .map(|i| self.basis.get(i, self.relevance_axis))
            .collect()
    }

    pub fn forward(&self, request: &Request) -> Result<ExpertOutput> {
        let skill = *self.profile.skill.get(&request.nation).ok_or_else(|| {
            Error::Config(format!(
                "expert `{}` has no skill entry for nation {}",
                self.profile.name, request.nation
            ))
        })?;
        let nation_axis = self.nation_axes[&request.nation];

        let mut key = Vec::with_capacity(request.query.len() + request.title.len() + 8);
        key.extend_from_slice(request.query.as_bytes());
        key.push(0x1f);
        key.extend_from_slice(request.title.as_bytes());
        key.push(0x1f);
        key.extend_from_slice(request.nation.as_bytes());
        let mut rng = Rng::derive(self.profile.seed, hash_bytes(0, &key));

        let evidence = relevance_evidence(&request.query, &request.title);
        let latent: Vec<f64> = self
            .noise_std
            .iter()
            .enumerate()
            .map(|(j, &std)| {
                let mut v = std * rng.normal();
                if j == self.relevance_axis {
                    v += self.signal.signal_gain * skill * evidence;
                }
                if j == nation_axis {
                    v += self.signal.nation_gain;
                }
                v
            })
            .collect();
        let hidden = self.basis.matvec(&latent)?;
        Ok(ExpertOutput {
            expert_id: self.profile.id,
            hidden,
        })
    }
}

/// One-shot forward pass; builds the expert's basis on every call.
pub fn expert_forward(
    profile: &ExpertProfile,
    signal: &SignalModel,
    request: &Request,
) -> Result<ExpertOutput> {
    MockExpert::new(profile.clone(), signal.clone())?.forward(request)
}

/// `base + batch_size · per_item`, in microseconds.
pub fn simulate_latency(profile: &ExpertProfile, batch_size: usize) -> Result<u64> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    Ok(profile.base_latency_us + batch_size as u64 * profile.per_item_latency_us)
}

/// Latency with a seeded uniform perturbation of relative width `jitter`.
pub fn simulate_latency_jittered(
    profile: &ExpertProfile,
    batch_size: usize,
    jitter: f64,
    rng: &mut Rng,
) -> Result<u64> {
    let base = simulate_latency(profile, batch_size)? as f64;
    let factor = 1.0 + rng.uniform(-jitter, jitter);
    Ok((base * factor).round().max(0.0) as u64)
}

/// Immutable collection of experts, indexed by id.
#[derive(Debug, Clone)]
pub struct Registry {
    experts: Vec<MockExpert>,
}

impl Registry {
    pub fn build(profiles: Vec<ExpertProfile>, signal: &SignalModel) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &profiles {
            if !seen.insert(p.id) {
                return Err(Error::DuplicateExpert(p.id));
            }
        }
        let mut experts = profiles
            .into_iter()
            .map(|p| MockExpert::new(p, signal.clone()))
            .collect::<Result<Vec<_>>>()?;
        experts.sort_by_key(|e| e.id());
        Ok(Self { experts })
    }

    pub fn get(&self, id: usize) -> Result<&MockExpert> {
        self.experts
            .binary_search_by_key(&id, |e| e.id())
            .map(|i| &self.experts[i])
            .map_err(|_| Error::UnknownExpert(id))
    }

    pub fn profile(&self, id: usize) -> Result<&ExpertProfile> {
        self.get(id).map(|e| e.profile())
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MockExpert> {
        self.experts.iter()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.id()).collect()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.experts.iter().map(|e| e.hidden_dim()).collect()
    }

    pub fn find_by_name(&self, name: &str) -> Option<&MockExpert> {
        self.experts.iter().find(|e| e.profile.name == name)
    }

    /// Dense id check: ids must be exactly `0..N`.
    pub fn ensure_dense_ids(&self) -> Result<()> {
        for (i, e) in self.experts.iter().enumerate() {
            if e.id() != i {
                return Err(Error::Config(format!(
                    "expert ids must be dense from 0; found {} at position {i}",
                    e.id()
                )));
            }
        }
        Ok(())
    }
}
