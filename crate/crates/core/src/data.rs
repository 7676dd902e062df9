//! Synthetic bars images, binarization, splits, and the dataset file.
//!
//! File layout, little-endian:
//!
//! ```text
//! "FMNDATA1"
//! u32 N, u32 H, u32 W
//! f64 probabilities, N * H * W, row-major
//! u8 split tag per image (0 train, 1 val, 2 test)
//! ```

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::checkpoint::Reader;
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"FMNDATA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarsSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    /// Bars switched on per image.
    pub n_factors: usize,
    /// Half-width of the uniform jitter added to each pixel probability.
    pub noise: f64,
    pub p_on: f64,
    pub p_off: f64,
    pub seed: u64,
}

impl Default for BarsSpec {
    fn default() -> Self {
        Self {
            n_train: 4096,
            n_val: 512,
            n_test: 512,
            h: 8,
            w: 8,
            n_factors: 6,
            noise: 0.0,
            p_on: 0.9,
            p_off: 0.1,
            seed: 0,
        }
    }
}

impl BarsSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 {
            return Err(Error::Invalid("image height and width must be positive".into()));
        }
        if self.n_factors > self.h + self.w {
            return Err(Error::Invalid(format!(
                "n_factors {} exceeds the {} available bars",
                self.n_factors,
                self.h + self.w
            )));
        }
        if self.total() == 0 {
            return Err(Error::Invalid("dataset must contain at least one image".into()));
        }
        for (k, p) in [("p_on", self.p_on), ("p_off", self.p_off)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{k} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pixel probabilities with split tags. Validation and test images carry a
/// fixed binarization computed once from the content hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub h: usize,
    pub w: usize,
    probs: Tensor,
    splits: Vec<Split>,
    fixed: Tensor,
}

impl Dataset {
    pub fn new(h: usize, w: usize, probs: Tensor, splits: Vec<Split>) -> Result<Self> {
        let (n, d) = probs.dims2()?;
        if d != h * w {
            return Err(Error::Invalid(format!("image width {d} is not {h}x{w}")));
        }
        if splits.len() != n {
            return Err(Error::Invalid("one split tag per image required".into()));
        }
        if let Some(p) = probs.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Invalid(format!("pixel probability {p} outside [0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(content_seed(&probs));
        let fixed = binarize(&probs, &mut rng);
        Ok(Self {
            h,
            w,
            probs,
            splits,
            fixed,
        })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.h * self.w
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split_probs(&self, split: Split) -> Tensor {
        self.probs.select_rows(&self.indices(split))
    }

    /// The cached binarization of one split; identical on every call.
    pub fn fixed_binary(&self, split: Split) -> Tensor {
        self.fixed.select_rows(&self.indices(split))
    }

    /// Restricts every split to its first `n` images.
    pub fn truncated(&self, n_train: usize, n_val: usize, n_test: usize) -> Self {
        let mut keep = Vec::new();
        let mut seen = [0usize; 3];
        let caps = [n_train, n_val, n_test];
        for (i, s) in self.splits.iter().enumerate() {
            let t = s.tag() as usize;
            if seen[t] < caps[t] {
                seen[t] += 1;
                keep.push(i);
            }
        }
        Self {
            h: self.h,
            w: self.w,
            probs: self.probs.select_rows(&keep),
            splits: keep.iter().map(|&i| self.splits[i]).collect(),
            fixed: self.fixed.select_rows(&keep),
        }
    }
}

fn content_seed(probs: &Tensor) -> u64 {
    let mut h = Sha256::new();
    for v in probs.data() {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Independent Bernoulli draw of every pixel, in row-major order.
pub fn binarize<R: Rng + ?Sized>(probs: &Tensor, rng: &mut R) -> Tensor {
    let data = probs
        .data()
        .iter()
        .map(|&p| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(probs.shape().to_vec(), data).expect("same length")
}

/// Generates a bars dataset. Each image switches on exactly `n_factors`
/// distinct bars chosen uniformly from the `H` rows and `W` columns. Pixels
/// covered by a bar get `p_on`, the rest `p_off`, each jittered by
/// `noise * U(-1, 1)` and clamped to `[0, 1]`. Images are split in order:
/// train, then validation, then test.
pub fn gen_bars(spec: &BarsSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let n = spec.total();
    let mut rng = stream(spec.seed, 0, 0, Purpose::Data);
    let mut data = Vec::with_capacity(n * h * w);
    let mut on = vec![false; h * w];
    for _ in 0..n {
        on.iter_mut().for_each(|v| *v = false);
        for bar in sample(&mut rng, h + w, spec.n_factors).into_iter() {
            if bar < h {
                on[bar * w..(bar + 1) * w].iter_mut().for_each(|v| *v = true);
            } else {
                let c = bar - h;
                (0..h).for_each(|r| on[r * w + c] = true);
            }
        }
        for &lit in &on {
            let base = if lit { spec.p_on } else { spec.p_off };
            let jitter = if spec.noise > 0.0 {
                spec.noise * rng.gen_range(-1.0..=1.0)
            } else {
                0.0
            };
            data.push((base + jitter).clamp(0.0, 1.0));
        }
    }
    let splits = std::iter::repeat(Split::Train)
        .take(spec.n_train)
        .chain(std::iter::repeat(Split::Val).take(spec.n_val))
        .chain(std::iter::repeat(Split::Test).take(spec.n_test))
        .collect();
    Dataset::new(h, w, Tensor::matrix(n, h * w, data), splits)
}

pub fn save_dataset(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.probs.len() * 8 + ds.len());
    out.extend_from_slice(DATA_MAGIC);
    for v in [ds.len(), ds.h, ds.w] {
        out.extend_from_slice(&u32::try_from(v).expect("dimension exceeds u32").to_le_bytes());
    }
    for p in ds.probs.data() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out.extend(ds.splits.iter().map(|s| s.tag()));
    out
}

pub fn load_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATA_MAGIC)?;
    let n = r.u32("image count")?;
    let h = r.u32("height")?;
    let w = r.u32("width")?;
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Format {
            offset: 8,
            message: "image dimensions overflow".into(),
        })?;
    let probs_at = r.pos();
    let probs = r.f64s(count, "pixel probabilities")?;
    if let Some(i) = probs.iter().position(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Format {
            offset: probs_at + 8 * i,
            message: format!("pixel probability {} outside [0, 1]", probs[i]),
        });
    }
    let tags_at = r.pos();
    let tags = r.take(n, "split tags")?;
    let mut splits = Vec::with_capacity(n);
    for (i, &t) in tags.iter().enumerate() {
        splits.push(Split::from_tag(t).ok_or_else(|| Error::Format {
            offset: tags_at + i,
            message: format!("unknown split tag {t}"),
        })?);
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.pos(),
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    Dataset::new(h, w, Tensor::matrix(n, h * w, probs), splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(n: usize, h: usize, w: usize, f: usize) -> BarsSpec {
        BarsSpec {
            n_train: n,
            n_val: 0,
            n_test: 0,
            h,
            w,
            n_factors: f,
            ..BarsSpec::default()
        }
    }

    fn distinct(ds: &Dataset) -> HashSet<Vec<u64>> {
        (0..ds.len())
            .map(|i| ds.probs().row(i).iter().map(|v| v.to_bits()).collect())
            .collect()
    }

    #[test]
    fn one_factor_four_by_four_has_eight_images() {
        let ds = gen_bars(&spec(2000, 4, 4, 1)).unwrap();
        assert_eq!(distinct(&ds).len(), 8);
    }

    #[test]
    fn too_many_factors_rejected() {
        assert!(gen_bars(&spec(10, 2, 2, 5)).is_err());
        assert!(gen_bars(&spec(10, 0, 2, 0)).is_err());
    }

    #[test]
    fn extreme_probabilities_binarize_deterministically() {
        let p = Tensor::matrix(50, 2, (0..100).map(|i| (i % 2) as f64).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(binarize(&p, &mut rng), p);
    }

    #[test]
    fn fixed_binarization_is_cached() {
        let ds = gen_bars(&BarsSpec {
            n_train: 10,
            n_val: 20,
            n_test: 5,
            ..BarsSpec::default()
        })
        .unwrap();
        let a = ds.fixed_binary(Split::Val);
        assert_eq!(a.rows(), 20);
        assert_eq!(a, ds.fixed_binary(Split::Val));
        let back = load_dataset(&save_dataset(&ds)).unwrap();
        assert_eq!(a, back.fixed_binary(Split::Val));
    }

    #[test]
    fn splits_disjoint_and_exhaustive() {
        let ds = gen_bars(&BarsSpec {
            n_train: 7,
            n_val: 3,
            n_test: 2,
            ..BarsSpec::default()
        })
        .unwrap();
        let mut all: Vec<usize> = [Split::Train, Split::Val, Split::Test]
            .iter()
            .flat_map(|&s| ds.indices(s))
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert_eq!(ds.indices(Split::Val).len(), 3);
    }

    #[test]
    fn hand_written_fixture() {
        let mut b = b"FMNDATA1".to_vec();
        b.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0]);
        // 1.0, 0.0, 0.5, 0.25 as little-endian f64
        b.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
        b.extend_from_slice(&[0; 8]);
        b.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xe0, 0x3f]);
        b.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0xd0, 0x3f]);
        b.push(2);
        let ds = load_dataset(&b).unwrap();
        assert_eq!((ds.len(), ds.h, ds.w), (1, 2, 2));
        assert_eq!(ds.probs().data(), &[1.0, 0.0, 0.5, 0.25]);
        assert_eq!(ds.splits(), &[Split::Test]);
        assert_eq!(save_dataset(&ds), b);
    }

    #[test]
    fn malformed_files_report_offsets() {
        let ds = gen_bars(&spec(3, 2, 3, 1)).unwrap();
        let b = save_dataset(&ds);
        for cut in [0, 7, 15, b.len() - 1] {
            assert!(matches!(load_dataset(&b[..cut]), Err(Error::Format { .. })));
        }
        let mut bad = b.clone();
        *bad.last_mut().unwrap() = 9;
        match load_dataset(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, b.len() - 1),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(load_dataset(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn jitter_stays_in_unit_interval() {
        let ds = gen_bars(&BarsSpec {
            noise: 0.3,
            n_train: 50,
            ..BarsSpec::default()
        })
        .unwrap();
        assert!(ds.probs().data().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
