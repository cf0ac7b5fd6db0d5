//! Labelled image sets: a procedurally generated two-level shape dataset, its
//! `FBDS` file format, and the CIFAR-100 binary record format.

use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Float, Rng, Tensor};

/// Images stored as bytes, channel-planar per sample (`[N, C, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub fine: Vec<usize>,
    pub coarse: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.fine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Images at `indices` scaled to `[-1, 1]`, with their fine and coarse
    /// labels.
    pub fn batch<T: Float>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("sample {i} of {}", self.len())));
            }
            data.extend(self.image(i).iter().map(|&b| T::from_f64(f64::from(b) / 127.5 - 1.0)));
        }
        let images = Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)?;
        let fine = indices.iter().map(|&i| self.fine[i]).collect();
        let coarse = indices.iter().map(|&i| self.coarse[i]).collect();
        Ok((images, fine, coarse))
    }

    /// Checks every label pair against `tax`.
    pub fn check_taxonomy(&self, tax: &Taxonomy) -> Result<()> {
        for (i, (&f, &c)) in self.fine.iter().zip(&self.coarse).enumerate() {
            if f >= tax.fine_count() || tax.parent(f) != c {
                return Err(Error::Taxonomy(format!(
                    "sample {i}: fine {f} / coarse {c} disagrees with the taxonomy"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the procedural shape dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub coarse_classes: usize,
    pub variants: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive Gaussian pixel noise, in `[0, 1]` units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            image_size: 16,
            coarse_classes: 4,
            variants: 3,
            train_per_class: 200,
            test_per_class: 50,
            noise: 0.3,
            seed: 0,
        }
    }
}

pub const COARSE_NAMES: [&str; 4] = ["rectangle", "ellipse", "cross", "stripes"];
const MIN_IMAGE: usize = 8;
/// Maximum centre offset as a fraction of the image side.
const JITTER: f64 = 0.12;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < MIN_IMAGE {
            return Err(Error::config(format!(
                "image size {} is too small to render shapes (minimum {MIN_IMAGE})",
                self.image_size
            )));
        }
        if self.coarse_classes == 0 || self.coarse_classes > COARSE_NAMES.len() {
            return Err(Error::config(format!(
                "coarse classes must be in 1..={}, got {}",
                COARSE_NAMES.len(),
                self.coarse_classes
            )));
        }
        if self.variants == 0 || self.variants > 3 {
            return Err(Error::config(format!("variants must be in 1..=3, got {}", self.variants)));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("per-class sample counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 1]", self.noise)));
        }
        Ok(())
    }

    /// Reads `key = value` lines (`image_size`, `coarse_classes`,
    /// `variants`, `train_per_class`, `test_per_class`, `noise`, `seed`),
    /// optionally prefixed with `data.`. `seed` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SyntheticSpec::default();
        let mut seed = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.strip_prefix("data.").unwrap_or(key);
            let int = || value.parse::<usize>().map_err(|_| at(format!("bad value `{value}` for `{key}`")));
            match key {
                "image_size" => spec.image_size = int()?,
                "coarse_classes" => spec.coarse_classes = int()?,
                "variants" => spec.variants = int()?,
                "train_per_class" => spec.train_per_class = int()?,
                "test_per_class" => spec.test_per_class = int()?,
                "noise" => spec.noise = value.parse().map_err(|_| at(format!("bad noise `{value}`")))?,
                "seed" => seed = Some(value.parse().map_err(|_| at(format!("bad seed `{value}`")))?),
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }
        spec.seed = seed.ok_or_else(|| Error::config("`seed` is required"))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn taxonomy(&self) -> Taxonomy {
        Taxonomy::balanced(self.coarse_classes, self.variants)
    }

    pub fn fine_classes(&self) -> usize {
        self.coarse_classes * self.variants
    }
}

/// Train and test splits plus their taxonomy. The splits draw from
/// independent random streams derived from the seed, so they never share a
/// sample.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Taxonomy)> {
    spec.validate()?;
    let mut root = Rng::new(spec.seed);
    let train = render_split(spec, spec.train_per_class, &mut root.fork(1));
    let test = render_split(spec, spec.test_per_class, &mut root.fork(2));
    Ok((train, test, spec.taxonomy()))
}

fn render_split(spec: &SyntheticSpec, per_class: usize, rng: &mut Rng) -> Dataset {
    let s = spec.image_size;
    let k = spec.fine_classes();
    let mut out = Dataset {
        channels: 3,
        height: s,
        width: s,
        pixels: Vec::with_capacity(k * per_class * 3 * s * s),
        fine: Vec::with_capacity(k * per_class),
        coarse: Vec::with_capacity(k * per_class),
    };
    // interleave classes so any prefix of the split stays roughly balanced
    for _ in 0..per_class {
        for fine in 0..k {
            let (coarse, variant) = (fine / spec.variants, fine % spec.variants);
            render_sample(spec, coarse, variant, rng, &mut out.pixels);
            out.fine.push(fine);
            out.coarse.push(coarse);
        }
    }
    out
}

struct Placement {
    cx: f64,
    cy: f64,
    radius: f64,
}

/// Coverage of pixel centre `(x, y)` by a shape of family `coarse`; the
/// fine variant only changes `p.radius`.
fn coverage(coarse: usize, p: &Placement, x: f64, y: f64) -> bool {
    let (dx, dy) = ((x - p.cx) / p.radius, (y - p.cy) / p.radius);
    let px = 1.0 / p.radius;
    match coarse {
        // filled square
        0 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        // ring
        1 => ((dx * dx + dy * dy).sqrt() - 1.0).abs() <= 0.8 * px,
        // plus sign
        2 => dx.abs() <= 1.0 && dy.abs() <= 1.0 && (dx.abs() <= 0.8 * px || dy.abs() <= 0.8 * px),
        // horizontal stripes two pixels wide inside a square patch
        _ => dx.abs() <= 1.0 && dy.abs() <= 1.0 && ((y - p.cy + 0.5) / 4.0).rem_euclid(1.0) < 0.5,
    }
}

/// Shape size of each fine variant relative to the largest.
const VARIANT_SCALE: [f64; 3] = [0.55, 0.775, 1.0];
/// Per-sample size jitter; small enough that neighbouring variants do not overlap.
const SCALE_JITTER: f64 = 0.07;

fn render_sample(spec: &SyntheticSpec, coarse: usize, variant: usize, rng: &mut Rng, out: &mut Vec<u8>) {
    let s = spec.image_size as f64;
    let placement = Placement {
        cx: s / 2.0 - 0.5 + rng.uniform(-JITTER, JITTER) * s,
        cy: s / 2.0 - 0.5 + rng.uniform(-JITTER, JITTER) * s,
        radius: s * 0.3 * VARIANT_SCALE[variant] * rng.uniform(1.0 - SCALE_JITTER, 1.0 + SCALE_JITTER),
    };
    let background: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.1, 0.35));
    let foreground: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.65, 0.95));
    let n = spec.image_size;
    let start = out.len();
    out.resize(start + 3 * n * n, 0);
    for y in 0..n {
        for x in 0..n {
            let on = coverage(coarse, &placement, x as f64, y as f64);
            for c in 0..3 {
                let base = if on { foreground[c] } else { background[c] };
                let v = if spec.noise > 0.0 {
                    base + spec.noise * rng.normal()
                } else {
                    base
                };
                out[start + (c * n + y) * n + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
}

const FBDS_MAGIC: &[u8; 4] = b"FBDS";
const FBDS_VERSION: u32 = 1;

/// `FBDS` layout (little-endian): magic, version u32, sample count u32,
/// channels/height/width u32, fine count u32, one u16 parent per fine class,
/// then per sample fine u16, coarse u16 and the pixel bytes.
pub fn encode_fbds(data: &Dataset, tax: &Taxonomy) -> Result<Vec<u8>> {
    data.check_taxonomy(tax)?;
    let mut out = Vec::with_capacity(32 + tax.fine_count() * 2 + data.len() * (4 + data.sample_len()));
    out.extend_from_slice(FBDS_MAGIC);
    for v in [
        FBDS_VERSION,
        data.len() as u32,
        data.channels as u32,
        data.height as u32,
        data.width as u32,
        tax.fine_count() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &p in tax.parents() {
        out.extend_from_slice(&(p as u16).to_le_bytes());
    }
    for i in 0..data.len() {
        out.extend_from_slice(&(data.fine[i] as u16).to_le_bytes());
        out.extend_from_slice(&(data.coarse[i] as u16).to_le_bytes());
        out.extend_from_slice(data.image(i));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_fbds(bytes: &[u8]) -> Result<(Dataset, Taxonomy)> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != FBDS_MAGIC {
        return Err(Error::format(0, "not an FBDS dataset (bad magic)"));
    }
    let version = cur.u32("version")?;
    if version != FBDS_VERSION {
        return Err(Error::format(4, format!("unsupported FBDS version {version}")));
    }
    let count = cur.u32("sample count")? as usize;
    let channels = cur.u32("channels")? as usize;
    let height = cur.u32("height")? as usize;
    let width = cur.u32("width")? as usize;
    let fine_count = cur.u32("fine count")? as usize;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::format(12, "zero image dimension"));
    }
    let mut parents = Vec::with_capacity(fine_count);
    for _ in 0..fine_count {
        parents.push(cur.u16("taxonomy")? as usize);
    }
    let tax = Taxonomy::new(parents)?;
    let sample_len = channels * height * width;
    let mut data = Dataset {
        channels,
        height,
        width,
        pixels: Vec::with_capacity(count.min(1 << 20) * sample_len),
        fine: Vec::with_capacity(count.min(1 << 20)),
        coarse: Vec::with_capacity(count.min(1 << 20)),
    };
    for _ in 0..count {
        let at = cur.pos;
        let fine = cur.u16("fine label")? as usize;
        let coarse = cur.u16("coarse label")? as usize;
        if fine >= fine_count || tax.parent(fine) != coarse {
            return Err(Error::format(at, format!("label pair ({fine}, {coarse}) disagrees with the taxonomy")));
        }
        data.pixels.extend_from_slice(cur.take(sample_len, "pixels")?);
        data.fine.push(fine);
        data.coarse.push(coarse);
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, "trailing bytes after the last sample"));
    }
    Ok((data, tax))
}

pub fn save_fbds(path: &Path, data: &Dataset, tax: &Taxonomy) -> Result<()> {
    std::fs::write(path, encode_fbds(data, tax)?)?;
    Ok(())
}

pub fn load_fbds(path: &Path) -> Result<(Dataset, Taxonomy)> {
    decode_fbds(&std::fs::read(path)?)
}

pub const CIFAR_RECORD: usize = 3074;

/// CIFAR-100 binary records: coarse label byte, fine label byte, then 3072
/// channel-planar pixel bytes of a 32x32 image. Alongside the samples comes
/// the parent of every fine label seen, `None` for ids never observed.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Dataset, Vec<Option<usize>>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut data = Dataset {
        channels: 3,
        height: 32,
        width: 32,
        pixels: Vec::with_capacity(count * (CIFAR_RECORD - 2)),
        fine: Vec::with_capacity(count),
        coarse: Vec::with_capacity(count),
    };
    let mut parent: Vec<Option<usize>> = Vec::new();
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let (coarse, fine) = (rec[0] as usize, rec[1] as usize);
        if parent.len() <= fine {
            parent.resize(fine + 1, None);
        }
        match parent[fine] {
            Some(p) if p != coarse => {
                return Err(Error::Taxonomy(format!(
                    "record {i}: fine label {fine} appears under coarse {coarse} and {p}"
                )))
            }
            _ => parent[fine] = Some(coarse),
        }
        data.coarse.push(coarse);
        data.fine.push(fine);
        data.pixels.extend_from_slice(&rec[2..]);
    }
    Ok((data, parent))
}

/// Records plus the taxonomy assembled from their label pairs; every fine id
/// up to the largest must occur.
pub fn decode_cifar(bytes: &[u8]) -> Result<(Dataset, Taxonomy)> {
    let (data, parent) = parse_cifar_records(bytes)?;
    let parent = parent
        .into_iter()
        .enumerate()
        .map(|(f, p)| p.ok_or_else(|| Error::Taxonomy(format!("fine label {f} never observed"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((data, Taxonomy::new(parent)?))
}

pub fn load_cifar_binary(path: &Path) -> Result<(Dataset, Taxonomy)> {
    decode_cifar(&std::fs::read(path)?)
}

/// Loads either file format, chosen by magic bytes.
pub fn load_any(path: &Path) -> Result<(Dataset, Taxonomy)> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(FBDS_MAGIC) {
        decode_fbds(&bytes)
    } else {
        decode_cifar(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 20,
            test_per_class: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let (a, at, tax) = generate_dataset(&spec).unwrap();
        let (b, bt, _) = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(at, bt);
        assert_eq!((tax.fine_count(), tax.coarse_count()), (12, 4));
        for f in 0..12 {
            assert_eq!(a.fine.iter().filter(|&&x| x == f).count(), 20);
        }
        a.check_taxonomy(&tax).unwrap();
        assert_ne!(a.image(0), at.image(0));
    }

    #[test]
    fn spec_file() {
        let spec = SyntheticSpec::parse("seed = 4\ndata.noise = 0.3\ntrain_per_class = 10\n").unwrap();
        assert_eq!((spec.seed, spec.noise, spec.train_per_class), (4, 0.3, 10));
        assert!(SyntheticSpec::parse("noise = 0.1\n").is_err());
        assert!(SyntheticSpec::parse("seed = 1\ncolour = red\n").is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        let err = generate_dataset(&SyntheticSpec { image_size: 4, ..small() }).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fbds_round_trip() {
        let (train, _, tax) = generate_dataset(&small()).unwrap();
        let bytes = encode_fbds(&train, &tax).unwrap();
        let (back, tax2) = decode_fbds(&bytes).unwrap();
        assert_eq!((back, tax2), (train, tax));
        let err = decode_fbds(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn cifar_records() {
        assert!(matches!(decode_cifar(&[]), Err(Error::Format { .. })));
        let mut rec = vec![3u8, 57];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let (data, parents) = parse_cifar_records(&rec).unwrap();
        assert_eq!((data.coarse[0], data.fine[0]), (3, 57));
        assert_eq!(data.image(0), &rec[2..]);
        assert_eq!(parents[57], Some(3));
        assert!(matches!(decode_cifar(&rec), Err(Error::Taxonomy(_))));

        let mut two = rec.clone();
        two.extend_from_slice(&rec);
        two[CIFAR_RECORD] = 4;
        assert!(matches!(decode_cifar(&two), Err(Error::Taxonomy(_))));
        assert!(matches!(decode_cifar(&rec[..100]), Err(Error::Format { .. })));
    }

    #[test]
    fn batch_scaling() {
        let (train, _, _) = generate_dataset(&small()).unwrap();
        let (x, fine, coarse) = train.batch::<f32>(&[0, 13]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 16, 16]);
        assert_eq!((fine, coarse), (vec![0, 1], vec![0, 0]));
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(train.batch::<f32>(&[10_000]).is_err());
    }
}
