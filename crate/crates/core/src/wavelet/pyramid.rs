use crate::error::{Error, Result};

use super::{dwt2, idwt2, idwt2_adjoint, FilterKind, Plane};

/// Detail bands of one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct DetailLevel {
    pub lh: Plane,
    pub hl: Plane,
    pub hh: Plane,
}

impl DetailLevel {
    pub fn zeros(side: usize, channels: usize) -> Self {
        DetailLevel {
            lh: Plane::zeros(side, side, channels),
            hl: Plane::zeros(side, side, channels),
            hh: Plane::zeros(side, side, channels),
        }
    }

    pub fn bands(&self) -> [&Plane; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    pub fn bands_mut(&mut self) -> [&mut Plane; 3] {
        [&mut self.lh, &mut self.hl, &mut self.hh]
    }

    pub fn side(&self) -> usize {
        self.lh.height()
    }
}

/// Multilevel wavelet coefficients of one square feature plane.
///
/// Level `i` holds bands of side `n_ll * 2^i`; the reconstructed plane has
/// side `n_ll * 2^levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPyramid {
    pub ll: Plane,
    pub levels: Vec<DetailLevel>,
    pub filter: FilterKind,
}

impl WaveletPyramid {
    pub fn zeros(n_ll: usize, channels: usize, levels: usize, filter: FilterKind) -> Self {
        WaveletPyramid {
            ll: Plane::zeros(n_ll, n_ll, channels),
            levels: (0..levels).map(|i| DetailLevel::zeros(n_ll << i, channels)).collect(),
            filter,
        }
    }

    /// Assembles a pyramid from parts, validating every band size.
    pub fn from_parts(ll: Plane, levels: Vec<DetailLevel>, filter: FilterKind) -> Result<Self> {
        let pyr = WaveletPyramid { ll, levels, filter };
        pyr.validate()?;
        Ok(pyr)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.ll.shape();
        if h != w || h == 0 {
            return Err(Error::Shape(format!("LL must be square and nonempty, got {h}x{w}")));
        }
        for (i, level) in self.levels.iter().enumerate() {
            let side = h << i;
            for (name, band) in ["lh", "hl", "hh"].iter().zip(level.bands()) {
                if band.shape() != (side, side, c) {
                    return Err(Error::Shape(format!(
                        "level {i} band {name} has shape {:?}, expected {:?}",
                        band.shape(),
                        (side, side, c)
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_ll(&self) -> usize {
        self.ll.height()
    }

    pub fn channels(&self) -> usize {
        self.ll.channels()
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Side of the plane reconstructed from the first `depth` levels.
    pub fn side_at(&self, depth: usize) -> usize {
        self.n_ll() << depth
    }

    pub fn side(&self) -> usize {
        self.side_at(self.depth())
    }

    /// Full inverse transform.
    pub fn reconstruct(&self) -> Result<Plane> {
        self.reconstruct_to(self.depth())
    }

    /// Inverse transform using only the first `depth` levels.
    pub fn reconstruct_to(&self, depth: usize) -> Result<Plane> {
        if depth > self.depth() {
            return Err(Error::Range(format!(
                "depth {depth} exceeds pyramid depth {}",
                self.depth()
            )));
        }
        let bank = self.filter.bank();
        let mut plane = self.ll.clone();
        for level in &self.levels[..depth] {
            plane = idwt2(&plane, &level.lh, &level.hl, &level.hh, &bank)?;
        }
        Ok(plane)
    }

    /// Gradient of `<reconstruct_to(depth), grad>` with respect to every
    /// coefficient. Levels at or above `depth` receive zero gradient.
    pub fn reconstruct_adjoint(&self, grad: &Plane, depth: usize) -> Result<WaveletPyramid> {
        if depth > self.depth() {
            return Err(Error::Range(format!(
                "depth {depth} exceeds pyramid depth {}",
                self.depth()
            )));
        }
        let side = self.side_at(depth);
        if grad.shape() != (side, side, self.channels()) {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match depth-{depth} plane {:?}",
                grad.shape(),
                (side, side, self.channels())
            )));
        }
        let bank = self.filter.bank();
        let mut out = WaveletPyramid::zeros(self.n_ll(), self.channels(), self.depth(), self.filter);
        let mut g = grad.clone();
        for i in (0..depth).rev() {
            let b = idwt2_adjoint(&g, &bank)?;
            out.levels[i] = DetailLevel {
                lh: b.lh,
                hl: b.hl,
                hh: b.hh,
            };
            g = b.ll;
        }
        out.ll = g;
        Ok(out)
    }

    /// Multilevel analysis of a square plane.
    pub fn decompose(plane: &Plane, levels: usize, filter: FilterKind) -> Result<Self> {
        let (h, w, _) = plane.shape();
        if h != w {
            return Err(Error::Size(format!("plane must be square, got {h}x{w}")));
        }
        if levels > 0 && (h % (1 << levels) != 0 || h >> levels == 0) {
            return Err(Error::Size(format!(
                "plane side {h} is not divisible by 2^{levels}"
            )));
        }
        let bank = filter.bank();
        let mut current = plane.clone();
        let mut details = Vec::with_capacity(levels);
        for _ in 0..levels {
            let b = dwt2(&current, &bank)?;
            details.push(DetailLevel {
                lh: b.lh,
                hl: b.hl,
                hh: b.hh,
            });
            current = b.ll;
        }
        details.reverse();
        Ok(WaveletPyramid {
            ll: current,
            levels: details,
            filter,
        })
    }

    /// Copy with one extra, all-zero level of finer detail.
    pub fn append_level(&self) -> Self {
        let mut next = self.clone();
        next.push_zero_level();
        next
    }

    pub fn push_zero_level(&mut self) {
        let side = self.side();
        let c = self.channels();
        self.levels.push(DetailLevel::zeros(side, c));
    }

    /// `sum |LH| + |HL| + |HH|` over all levels; LL excluded.
    pub fn detail_l1(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| l.bands())
            .map(Plane::abs_sum)
            .sum()
    }

    pub fn detail_count(&self) -> usize {
        self.levels
            .iter()
            .flat_map(|l| l.bands())
            .map(|b| b.data().len())
            .sum()
    }

    pub fn coefficient_count(&self) -> usize {
        self.ll.data().len() + self.detail_count()
    }

    /// All coefficient slices in storage order: LL, then per level LH, HL, HH.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.ll.data()];
        for l in &self.levels {
            for b in l.bands() {
                out.push(b.data());
            }
        }
        out
    }
}
