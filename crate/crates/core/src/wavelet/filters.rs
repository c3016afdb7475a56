use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// A finite filter with support `[start, start + coeffs.len())`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Taps {
    pub coeffs: &'static [f64],
    pub start: isize,
}

impl Taps {
    const fn centered(coeffs: &'static [f64]) -> Self {
        Taps {
            coeffs,
            start: -((coeffs.len() / 2) as isize),
        }
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Coefficient at integer offset `k`, zero outside the support.
    pub fn at(&self, k: isize) -> f64 {
        let idx = k - self.start;
        if idx < 0 || idx as usize >= self.coeffs.len() {
            0.0
        } else {
            self.coeffs[idx as usize]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterKind {
    #[serde(rename = "haar")]
    Haar,
    #[serde(rename = "bior2.2")]
    Bior2_2,
    #[serde(rename = "bior2.6")]
    Bior2_6,
    #[serde(rename = "bior4.4")]
    Bior4_4,
    #[serde(rename = "bior6.8")]
    Bior6_8,
}

impl FilterKind {
    pub const ALL: [FilterKind; 5] = [
        FilterKind::Haar,
        FilterKind::Bior2_2,
        FilterKind::Bior2_6,
        FilterKind::Bior4_4,
        FilterKind::Bior6_8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Haar => "haar",
            FilterKind::Bior2_2 => "bior2.2",
            FilterKind::Bior2_6 => "bior2.6",
            FilterKind::Bior4_4 => "bior4.4",
            FilterKind::Bior6_8 => "bior6.8",
        }
    }

    /// Stable one-byte code used by the checkpoint container.
    pub fn code(self) -> u8 {
        match self {
            FilterKind::Haar => 0,
            FilterKind::Bior2_2 => 1,
            FilterKind::Bior2_6 => 2,
            FilterKind::Bior4_4 => 3,
            FilterKind::Bior6_8 => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        FilterKind::ALL.into_iter().find(|k| k.code() == code)
    }

    pub fn bank(self) -> FilterBank {
        FilterBank::new(self)
    }
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', ".");
        FilterKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown wavelet filter `{s}`")))
    }
}

/// Analysis and synthesis filters of a two-channel filter bank.
///
/// The low-pass analysis filter is anchored on even samples and the
/// high-pass one on odd samples, so that the four biorthogonal families
/// (all odd-length, whole-sample symmetric) reconstruct perfectly under
/// whole-sample symmetric extension. Haar never reaches the boundary on
/// even-length signals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterBank {
    pub kind: FilterKind,
    pub analysis_lo: Taps,
    pub analysis_hi: Taps,
    pub synthesis_lo: Taps,
    pub synthesis_hi: Taps,
}

const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

static HAAR_LO: [f64; 2] = [S, S];
static HAAR_HI: [f64; 2] = [S, -S];

static BIOR2_2_DEC_LO: [f64; 5] = [
    -0.1767766952966369,
    0.3535533905932738,
    1.0606601717798212,
    0.3535533905932738,
    -0.1767766952966369,
];
#[allow(clippy::approx_constant)]
static BIOR2_2_DEC_HI: [f64; 3] = [0.3535533905932738, -0.7071067811865476, 0.3535533905932738];
#[allow(clippy::approx_constant)]
static BIOR2_2_REC_LO: [f64; 3] = [0.3535533905932738, 0.7071067811865476, 0.3535533905932738];
static BIOR2_2_REC_HI: [f64; 5] = [
    0.1767766952966369,
    0.3535533905932738,
    -1.0606601717798212,
    0.3535533905932738,
    0.1767766952966369,
];

static BIOR2_6_DEC_LO: [f64; 13] = [
    -0.006905339660024878,
    0.013810679320049757,
    0.04695630968816917,
    -0.1077232986963881,
    -0.16987135563661201,
    0.4474660099696121,
    0.966747552403483,
    0.4474660099696121,
    -0.16987135563661201,
    -0.1077232986963881,
    0.04695630968816917,
    0.013810679320049757,
    -0.006905339660024878,
];
static BIOR2_6_DEC_HI: [f64; 3] = BIOR2_2_DEC_HI;
static BIOR2_6_REC_LO: [f64; 3] = BIOR2_2_REC_LO;
static BIOR2_6_REC_HI: [f64; 13] = [
    0.006905339660024878,
    0.013810679320049757,
    -0.04695630968816917,
    -0.1077232986963881,
    0.16987135563661201,
    0.4474660099696121,
    -0.966747552403483,
    0.4474660099696121,
    0.16987135563661201,
    -0.1077232986963881,
    -0.04695630968816917,
    0.013810679320049757,
    0.006905339660024878,
];

static BIOR4_4_DEC_LO: [f64; 9] = [
    0.03782845550726404,
    -0.023849465019556843,
    -0.11062440441843718,
    0.37740285561283066,
    0.8526986790088938,
    0.37740285561283066,
    -0.11062440441843718,
    -0.023849465019556843,
    0.03782845550726404,
];
static BIOR4_4_DEC_HI: [f64; 7] = [
    -0.06453888262869706,
    0.04068941760916406,
    0.41809227322161724,
    -0.7884856164055829,
    0.41809227322161724,
    0.04068941760916406,
    -0.06453888262869706,
];
static BIOR4_4_REC_LO: [f64; 7] = [
    -0.06453888262869706,
    -0.04068941760916406,
    0.41809227322161724,
    0.7884856164055829,
    0.41809227322161724,
    -0.04068941760916406,
    -0.06453888262869706,
];
static BIOR4_4_REC_HI: [f64; 9] = [
    -0.03782845550726404,
    -0.023849465019556843,
    0.11062440441843718,
    0.37740285561283066,
    -0.8526986790088938,
    0.37740285561283066,
    0.11062440441843718,
    -0.023849465019556843,
    -0.03782845550726404,
];

static BIOR6_8_DEC_LO: [f64; 17] = [
    0.0019088317364812906,
    -0.0019142861290887667,
    -0.016990639867602342,
    0.01193456527972926,
    0.04973290349094079,
    -0.07726317316720414,
    -0.09405920349573646,
    0.4207962846098268,
    0.8259229974584023,
    0.4207962846098268,
    -0.09405920349573646,
    -0.07726317316720414,
    0.04973290349094079,
    0.01193456527972926,
    -0.016990639867602342,
    -0.0019142861290887667,
    0.0019088317364812906,
];
static BIOR6_8_DEC_HI: [f64; 11] = [
    0.014426282505624435,
    -0.014467504896790148,
    -0.07872200106262882,
    0.04036797903033992,
    0.41784910915027457,
    -0.7589077294536541,
    0.41784910915027457,
    0.04036797903033992,
    -0.07872200106262882,
    -0.014467504896790148,
    0.014426282505624435,
];
static BIOR6_8_REC_LO: [f64; 11] = [
    0.014426282505624435,
    0.014467504896790148,
    -0.07872200106262882,
    -0.04036797903033992,
    0.41784910915027457,
    0.7589077294536541,
    0.41784910915027457,
    -0.04036797903033992,
    -0.07872200106262882,
    0.014467504896790148,
    0.014426282505624435,
];
static BIOR6_8_REC_HI: [f64; 17] = [
    -0.0019088317364812906,
    -0.0019142861290887667,
    0.016990639867602342,
    0.01193456527972926,
    -0.04973290349094079,
    -0.07726317316720414,
    0.09405920349573646,
    0.4207962846098268,
    -0.8259229974584023,
    0.4207962846098268,
    0.09405920349573646,
    -0.07726317316720414,
    -0.04973290349094079,
    0.01193456527972926,
    0.016990639867602342,
    -0.0019142861290887667,
    -0.0019088317364812906,
];

impl FilterBank {
    pub fn new(kind: FilterKind) -> Self {
        let (alo, ahi, slo, shi) = match kind {
            FilterKind::Haar => {
                // d[i] = (x[2i] - x[2i+1]) / sqrt(2), anchored one sample left of the odd site.
                return FilterBank {
                    kind,
                    analysis_lo: Taps { coeffs: &HAAR_LO, start: 0 },
                    analysis_hi: Taps { coeffs: &HAAR_HI, start: -1 },
                    synthesis_lo: Taps { coeffs: &HAAR_LO, start: 0 },
                    synthesis_hi: Taps { coeffs: &HAAR_HI, start: -1 },
                };
            }
            FilterKind::Bior2_2 => (
                &BIOR2_2_DEC_LO[..],
                &BIOR2_2_DEC_HI[..],
                &BIOR2_2_REC_LO[..],
                &BIOR2_2_REC_HI[..],
            ),
            FilterKind::Bior2_6 => (
                &BIOR2_6_DEC_LO[..],
                &BIOR2_6_DEC_HI[..],
                &BIOR2_6_REC_LO[..],
                &BIOR2_6_REC_HI[..],
            ),
            FilterKind::Bior4_4 => (
                &BIOR4_4_DEC_LO[..],
                &BIOR4_4_DEC_HI[..],
                &BIOR4_4_REC_LO[..],
                &BIOR4_4_REC_HI[..],
            ),
            FilterKind::Bior6_8 => (
                &BIOR6_8_DEC_LO[..],
                &BIOR6_8_DEC_HI[..],
                &BIOR6_8_REC_LO[..],
                &BIOR6_8_REC_HI[..],
            ),
        };
        FilterBank {
            kind,
            analysis_lo: Taps::centered(alo),
            analysis_hi: Taps::centered(ahi),
            synthesis_lo: Taps::centered(slo),
            synthesis_hi: Taps::centered(shi),
        }
    }

    /// Longest filter support; signals shorter than this are rejected.
    pub fn support(&self) -> usize {
        [
            self.analysis_lo.len(),
            self.analysis_hi.len(),
            self.synthesis_lo.len(),
            self.synthesis_hi.len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}
