use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::PriorLayout;
use crate::error::{Error, Result};
use crate::spriteworld::{Clip, Image};

/// Which frames fill the identity and pose slots of the visual prior.
/// Serialized by its command-line name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategyKind {
    /// One random frame fills both slots; no bottleneck.
    Rnd,
    /// The previous frame fills both slots; no bottleneck.
    Prv,
    /// Bottlenecked previous frames; the identity slot is zero.
    PrvBN,
    /// Random identity frame plus bottlenecked previous frames.
    RndPlusPrvBN,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [Self::Rnd, Self::Prv, Self::PrvBN, Self::RndPlusPrvBN];

    pub fn bottleneck(self) -> bool {
        matches!(self, Self::PrvBN | Self::RndPlusPrvBN)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Self::Rnd => "rnd",
            Self::Prv => "prv",
            Self::PrvBN => "prvbn",
            Self::RndPlusPrvBN => "rnd+prvbn",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Rnd => "Rnd",
            Self::Prv => "Prv",
            Self::PrvBN => "PrvBN",
            Self::RndPlusPrvBN => "RndPlusPrvBN",
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|k| k.cli_name() == key || k.to_string().to_ascii_lowercase() == key).ok_or_else(
            || Error::InvalidArgument(format!("unknown strategy {s:?}; expected rnd, prv, prvbn or rnd+prvbn")),
        )
    }
}

impl TryFrom<String> for StrategyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StrategyKind> for String {
    fn from(k: StrategyKind) -> String {
        k.cli_name().to_string()
    }
}

/// A strategy with its previous-frame count; `np` is 1 for the unbottlenecked kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RefStrategy {
    pub kind: StrategyKind,
    pub np: usize,
}

impl RefStrategy {
    pub fn new(kind: StrategyKind, np: usize) -> Result<Self> {
        if np == 0 {
            return Err(Error::InvalidArgument("np must be at least 1".into()));
        }
        if !kind.bottleneck() && np != 1 {
            return Err(Error::InvalidArgument(format!("{kind} uses a single reference frame, got np={np}")));
        }
        Ok(Self { kind, np })
    }

    pub fn layout(&self) -> PriorLayout {
        PriorLayout { np: self.np, bottleneck: self.kind.bottleneck() }
    }

    /// Earliest target with a full history; earlier targets are skipped in training.
    pub fn first_target(&self) -> usize {
        self.np
    }
}

impl fmt::Display for RefStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)
    }
}

/// Frame indices feeding one prior; `identity: None` is a zero identity latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefIndices {
    pub identity: Option<usize>,
    pub poses: Vec<usize>,
}

/// Uniform frame of `0..len` other than `t`.
fn random_other(len: usize, t: usize, rng: &mut ChaCha8Rng) -> usize {
    let r = rng.random_range(0..len - 1);
    if r >= t {
        r + 1
    } else {
        r
    }
}

/// Training-time reference frames for target `t` of a `len`-frame clip.
pub fn sample_reference_indices(
    strategy: &RefStrategy,
    len: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RefIndices> {
    if t >= len || len < 2 {
        return Err(Error::InvalidArgument(format!("target {t} outside {len}-frame clip")));
    }
    if t < strategy.np {
        return Err(Error::InvalidArgument(format!("target {t} has fewer than np={} previous frames", strategy.np)));
    }
    let previous: Vec<usize> = (t - strategy.np..t).collect();
    Ok(match strategy.kind {
        StrategyKind::Rnd => {
            let r = random_other(len, t, rng);
            RefIndices { identity: Some(r), poses: vec![r] }
        }
        StrategyKind::Prv => RefIndices { identity: Some(t - 1), poses: previous },
        StrategyKind::PrvBN => RefIndices { identity: None, poses: previous },
        StrategyKind::RndPlusPrvBN => RefIndices { identity: Some(random_other(len, t, rng)), poses: previous },
    })
}

/// Images selected by [`sample_reference_indices`].
pub fn sample_references(
    strategy: &RefStrategy,
    clip: &Clip,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Image>, Vec<Image>)> {
    let idx = sample_reference_indices(strategy, clip.len(), t, rng)?;
    Ok((idx.identity.map(|i| clip.frames[i].clone()), idx.poses.iter().map(|&i| clip.frames[i].clone()).collect()))
}

/// Source of one inference-time reference slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefSource {
    /// The given seed frame.
    Seed,
    /// A previously generated frame.
    Generated(usize),
    Zero,
}

/// Inference-time references for target `t ≥ 1`: the seed frame is the identity
/// where the strategy has one, and generated frames `t−np…t−1` are the poses
/// (indices below zero repeat the seed frame). The unbottlenecked kinds take the
/// generated previous frame as their single reference.
pub fn inference_references(strategy: &RefStrategy, t: usize) -> Result<(RefSource, Vec<RefSource>)> {
    if t == 0 {
        return Err(Error::InvalidArgument("frame 0 is the given seed frame".into()));
    }
    let poses: Vec<RefSource> =
        (0..strategy.np).map(|j| RefSource::Generated((t + j).saturating_sub(strategy.np))).collect();
    Ok(match strategy.kind {
        StrategyKind::Rnd | StrategyKind::Prv => (RefSource::Generated(t - 1), vec![RefSource::Generated(t - 1)]),
        StrategyKind::PrvBN => (RefSource::Zero, poses),
        StrategyKind::RndPlusPrvBN => (RefSource::Seed, poses),
    })
}
