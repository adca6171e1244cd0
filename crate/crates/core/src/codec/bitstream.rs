//! Entropy-coded latents and the `CPIP` container.
//!
//! Layout (little-endian): magic `CPIP`, version `u8`, model hash `u32`,
//! width `u16`, height `u16`, quality `u8`, `u32`-prefixed z stream,
//! `u32`-prefixed y stream, CRC32 of every preceding byte.

use std::cell::OnceCell;

use percsim_autograd::Tensor;

use super::entropy::{self, FactorizedPrior, LatentCode, LikelihoodModel, QuantMode};
use super::model::{Codec, SIGMA_MIN};
use super::rans::{CdfTable, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Padding};

pub const MAGIC: &[u8; 4] = b"CPIP";
pub const VERSION: u8 = 1;
/// Bytes before the z stream.
pub const FIXED_HEADER_LEN: usize = 4 + 1 + 4 + 2 + 2 + 1;

/// Number of log-spaced Gaussian scales with a frozen table.
pub const NUM_SCALES: usize = 1024;
pub const SCALE_MAX: f64 = 256.0;
/// Gaussian tables cover `[-ceil(TAIL * s), ceil(TAIL * s)]`.
const GAUSSIAN_TAIL: f64 = 6.2;
const FACTORIZED_TAIL: f64 = 1e-9;
const FACTORIZED_RANGE: i64 = 1000;

/// Frozen integer CDFs derived from a codec's entropy model.
pub struct EntropyTables {
    gaussian: Vec<OnceCell<CdfTable>>,
    factorized: Vec<CdfTable>,
}

impl EntropyTables {
    pub fn new(codec: &Codec) -> Result<Self> {
        let prior = FactorizedPrior::from_params(&codec.params)?;
        let factorized = (0..prior.channels()).map(|c| factorized_table(&prior, c)).collect::<Result<_>>()?;
        Ok(Self { gaussian: (0..NUM_SCALES).map(|_| OnceCell::new()).collect(), factorized })
    }

    /// Table whose scale is nearest to `sigma` in log space.
    pub fn gaussian(&self, sigma: f64) -> Result<&CdfTable> {
        let i = scale_index(sigma);
        if let Some(t) = self.gaussian[i].get() {
            return Ok(t);
        }
        let t = gaussian_table(scale_value(i))?;
        Ok(self.gaussian[i].get_or_init(|| t))
    }

    pub fn factorized(&self, channel: usize) -> &CdfTable {
        &self.factorized[channel]
    }
}

pub fn scale_value(i: usize) -> f64 {
    let (lo, hi) = (SIGMA_MIN.ln(), SCALE_MAX.ln());
    (lo + (hi - lo) * i as f64 / (NUM_SCALES - 1) as f64).exp()
}

pub fn scale_index(sigma: f64) -> usize {
    let (lo, hi) = (SIGMA_MIN.ln(), SCALE_MAX.ln());
    let t = (sigma.max(SIGMA_MIN).ln() - lo) / (hi - lo) * (NUM_SCALES - 1) as f64;
    (t.round().max(0.0) as usize).min(NUM_SCALES - 1)
}

fn gaussian_table(sigma: f64) -> Result<CdfTable> {
    let r = (GAUSSIAN_TAIL * sigma).ceil() as i64;
    let pmf: Vec<f64> = (-r..=r).map(|k| entropy::gaussian_mass(k as f64, sigma)).collect();
    let tail = 2.0 * percsim_autograd::normal_cdf(-(r as f64 + 0.5) / sigma);
    CdfTable::from_pmf(-r, &pmf, tail)
}

fn factorized_table(prior: &FactorizedPrior, c: usize) -> Result<CdfTable> {
    let n = FACTORIZED_RANGE;
    let edges: Vec<f64> = (-n..=n + 1).map(|k| k as f64 - 0.5).collect();
    let cdf = prior.cdf(c, &edges);
    // cdf[i] is the CDF at (i - n) - 0.5
    let below = |k: i64| cdf[(k + n) as usize];
    let median = (-n..=n).find(|&k| below(k + 1) >= 0.5).unwrap_or(0);
    let mut lo = median;
    while lo > -n && below(lo) >= FACTORIZED_TAIL {
        lo -= 1;
    }
    let mut hi = median;
    while hi < n && 1.0 - below(hi + 1) >= FACTORIZED_TAIL {
        hi += 1;
    }
    let support: Vec<f64> = (lo..=hi).map(|k| k as f64).collect();
    let pmf = prior.bin_mass(c, &support);
    let escape = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    CdfTable::from_pmf(lo, &pmf, escape)
}

fn integer(v: f64) -> Result<i64> {
    if v.fract() != 0.0 || !v.is_finite() || v.abs() > 1e15 {
        return Err(Error::Domain(format!("latent value {v} is not a codable integer")));
    }
    Ok(v as i64)
}

/// The z and y payloads of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedLatents {
    pub z: Vec<u8>,
    pub y: Vec<u8>,
}

impl CodedLatents {
    pub fn payload_len(&self) -> usize {
        self.z.len() + self.y.len()
    }
}

/// Entropy-code round-mode latents: z under the factorized prior, y under
/// the Gaussian conditional whose scales come from `h_s(z)`.
pub fn entropy_code(code: &LatentCode, codec: &Codec, tables: &EntropyTables) -> Result<CodedLatents> {
    if code.mode != QuantMode::Round {
        return Err(Error::Precondition("only round-mode latents can be coded".into()));
    }
    let (ys, zs) = (code.y.shape(), code.z.shape());
    if ys.len() != 3 || zs.len() != 3 || ys[0] != codec.spec.latent_channels || zs[0] != codec.spec.hyper_channels {
        return Err(Error::Dimension(format!("latent shapes {ys:?} / {zs:?} do not fit the codec")));
    }
    let mut ez = Encoder::new();
    let zplane = zs[1] * zs[2];
    for (i, &v) in code.z.data().iter().enumerate() {
        ez.put(tables.factorized(i / zplane.max(1)), integer(v)?);
    }
    let mut ey = Encoder::new();
    if !code.y.is_empty() {
        let sigma = codec.sigma_from_z(&code.z);
        if sigma.shape() != ys {
            return Err(Error::Dimension(format!("scales {:?} do not match y {ys:?}", sigma.shape())));
        }
        for (&v, &s) in code.y.data().iter().zip(sigma.data()) {
            ey.put(tables.gaussian(s)?, integer(v)?);
        }
    }
    Ok(CodedLatents { z: ez.finish(), y: ey.finish() })
}

/// Inverse of [`entropy_code`] for the given latent shapes.
pub fn entropy_decode(
    coded: &CodedLatents,
    codec: &Codec,
    tables: &EntropyTables,
    y_shape: [usize; 3],
    z_shape: [usize; 3],
) -> Result<LatentCode> {
    let mut dz = Decoder::new(&coded.z);
    let zplane = z_shape[1] * z_shape[2];
    let n = z_shape.iter().product::<usize>();
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        z.push(dz.get(tables.factorized(i / zplane.max(1)))? as f64);
    }
    dz.finish()?;
    let z = Tensor::new(&z_shape, z);
    let mut dy = Decoder::new(&coded.y);
    let m = y_shape.iter().product::<usize>();
    let mut y = Vec::with_capacity(m);
    if m > 0 {
        let sigma = codec.sigma_from_z(&z);
        if sigma.shape() != y_shape {
            return Err(Error::Dimension(format!("scales {:?} do not match y {y_shape:?}", sigma.shape())));
        }
        for &s in sigma.data() {
            y.push(dy.get(tables.gaussian(s)?)? as f64);
        }
    }
    dy.finish()?;
    let y = Tensor::new(&y_shape, y);
    latent_code(codec, y, z)
}

/// Attach likelihoods to round-mode latents.
pub fn latent_code(codec: &Codec, y: Tensor, z: Tensor) -> Result<LatentCode> {
    let prior = FactorizedPrior::from_params(&codec.params)?;
    let z_likelihoods = entropy::likelihood(&z, &LikelihoodModel::Factorized(&prior))?;
    let y_likelihoods = if y.is_empty() {
        Tensor::zeros(y.shape())
    } else {
        let sigma = codec.sigma_from_z(&z);
        entropy::likelihood(&y, &LikelihoodModel::Gaussian(&sigma))?
    };
    Ok(LatentCode { y, z, y_likelihoods, z_likelihoods, mode: QuantMode::Round })
}

/// Parsed fixed header fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub model_hash: u32,
    pub width: u16,
    pub height: u16,
    pub quality: u8,
}

/// Output of [`compress`].
#[derive(Clone, Debug)]
pub struct Compressed {
    pub bytes: Vec<u8>,
    pub header: StreamHeader,
    pub code: LatentCode,
    pub coded: CodedLatents,
    /// What the decoder will reconstruct.
    pub reconstruction: ImageTensor,
}

impl Compressed {
    pub fn bpp(&self) -> f64 {
        8.0 * self.bytes.len() as f64 / (f64::from(self.header.width) * f64::from(self.header.height))
    }
}

/// Round-mode latents of one image.
pub fn encode_latents(codec: &Codec, image: &ImageTensor) -> Result<(LatentCode, Padding)> {
    let analysis = codec.analyze(image)?;
    let y_hat = analysis.y.map(f64::round_ties_even);
    let (z, _) = codec.hyper_forward(&analysis.y)?;
    let z_hat = z.map(f64::round_ties_even);
    Ok((latent_code(codec, y_hat, z_hat)?, analysis.padding))
}

pub fn compress(codec: &Codec, image: &ImageTensor, quality: u8) -> Result<Compressed> {
    let tables = EntropyTables::new(codec)?;
    compress_with(codec, &tables, image, quality)
}

/// [`compress`] reusing prebuilt tables.
pub fn compress_with(codec: &Codec, tables: &EntropyTables, image: &ImageTensor, quality: u8) -> Result<Compressed> {
    let (width, height) = (dim16(image.width())?, dim16(image.height())?);
    let (code, padding) = encode_latents(codec, image)?;
    let coded = entropy_code(&code, codec, tables)?;
    let header = StreamHeader { version: VERSION, model_hash: codec.model_hash(), width, height, quality };
    let mut bytes = Vec::with_capacity(FIXED_HEADER_LEN + 12 + coded.payload_len());
    bytes.extend_from_slice(MAGIC);
    bytes.push(header.version);
    bytes.extend_from_slice(&header.model_hash.to_le_bytes());
    bytes.extend_from_slice(&width.to_le_bytes());
    bytes.extend_from_slice(&height.to_le_bytes());
    bytes.push(quality);
    for part in [&coded.z, &coded.y] {
        bytes.extend_from_slice(&(part.len() as u32).to_le_bytes());
        bytes.extend_from_slice(part);
    }
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let reconstruction = codec.synthesize(&code.y, Some(&padding))?;
    Ok(Compressed { bytes, header, code, coded, reconstruction })
}

fn dim16(n: usize) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::Domain(format!("dimension {n} does not fit the container")))
}

/// Validate the container and split it into header and payloads.
pub fn parse(bytes: &[u8]) -> Result<(StreamHeader, CodedLatents)> {
    let corrupt = |m: &str| Error::Corrupt(m.to_string());
    if bytes.len() < FIXED_HEADER_LEN + 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(corrupt("checksum mismatch"));
    }
    if body[4] != VERSION {
        return Err(corrupt(&format!("unsupported version {}", body[4])));
    }
    let header = StreamHeader {
        version: body[4],
        model_hash: u32::from_le_bytes(body[5..9].try_into().unwrap()),
        width: u16::from_le_bytes(body[9..11].try_into().unwrap()),
        height: u16::from_le_bytes(body[11..13].try_into().unwrap()),
        quality: body[13],
    };
    let mut pos = FIXED_HEADER_LEN;
    let mut take = || -> Result<Vec<u8>> {
        let len = body.get(pos..pos + 4).ok_or_else(|| corrupt("truncated length"))?;
        let len = u32::from_le_bytes(len.try_into().unwrap()) as usize;
        let part = body.get(pos + 4..pos + 4 + len).ok_or_else(|| corrupt("truncated stream"))?;
        pos += 4 + len;
        Ok(part.to_vec())
    };
    let z = take()?;
    let y = take()?;
    if pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((header, CodedLatents { z, y }))
}

/// Decode a container into the latents and the clamped, cropped image.
pub fn decompress(codec: &Codec, bytes: &[u8]) -> Result<(ImageTensor, LatentCode, StreamHeader)> {
    let tables = EntropyTables::new(codec)?;
    decompress_with(codec, &tables, bytes)
}

pub fn decompress_with(
    codec: &Codec,
    tables: &EntropyTables,
    bytes: &[u8],
) -> Result<(ImageTensor, LatentCode, StreamHeader)> {
    let (header, coded) = parse(bytes)?;
    if header.model_hash != codec.model_hash() {
        return Err(Error::Corrupt(format!(
            "stream was produced by model {:08x}, not {:08x}",
            header.model_hash,
            codec.model_hash()
        )));
    }
    let (h, w) = (usize::from(header.height), usize::from(header.width));
    let m = codec.spec.pad_multiple();
    let padding = Padding { height: h, width: w, padded_height: h.div_ceil(m) * m, padded_width: w.div_ceil(m) * m };
    let code = entropy_decode(&coded, codec, tables, codec.latent_shape(&padding), codec.hyper_shape(&padding))?;
    let image = codec.synthesize(&code.y, Some(&padding))?;
    Ok((image, code, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::spec::EncoderSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_codec() -> Codec {
        Codec::init(EncoderSpec::cpips_stages(&[4, 8], 2, 6, 4), 11).unwrap()
    }

    #[test]
    fn scale_grid_endpoints() {
        assert!((scale_value(0) - SIGMA_MIN).abs() < 1e-12);
        assert!((scale_value(NUM_SCALES - 1) - SCALE_MAX).abs() < 1e-9);
        assert_eq!(scale_index(0.01), 0);
        assert_eq!(scale_index(1e6), NUM_SCALES - 1);
        for i in [0, 17, 500, NUM_SCALES - 1] {
            assert_eq!(scale_index(scale_value(i)), i);
        }
    }

    #[test]
    fn image_round_trip_matches_encoder_side() {
        let codec = small_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = ImageTensor::from_fn(3, 20, 36, |_, _, _| rng.gen());
        let c = compress(&codec, &img, 3).unwrap();
        let (out, code, header) = decompress(&codec, &c.bytes).unwrap();
        assert_eq!(code.y, c.code.y);
        assert_eq!(code.z, c.code.z);
        assert_eq!(out, c.reconstruction);
        assert_eq!((out.height(), out.width()), (20, 36));
        assert_eq!(header.quality, 3);
        assert_eq!(compress(&codec, &img, 3).unwrap().bytes, c.bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let codec = small_codec();
        let img = ImageTensor::from_fn(3, 16, 16, |c, y, x| ((c + y * x) % 7) as f64 / 7.0);
        let bytes = compress(&codec, &img, 1).unwrap().bytes;
        for i in [0, 6, FIXED_HEADER_LEN + 5, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(decompress(&codec, &bad).is_err(), "flip at {i}");
        }
        assert!(decompress(&codec, &bytes[..bytes.len() - 3]).is_err());
        let other = Codec::init(codec.spec.clone(), 12).unwrap();
        assert!(matches!(decompress(&other, &bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn empty_latent_is_header_only() {
        let codec = small_codec();
        let tables = EntropyTables::new(&codec).unwrap();
        let code = latent_code(&codec, Tensor::zeros(&[6, 0, 0]), Tensor::zeros(&[4, 0, 0])).unwrap();
        let coded = entropy_code(&code, &codec, &tables).unwrap();
        assert_eq!(coded.payload_len(), 0);
        let back = entropy_decode(&coded, &codec, &tables, [6, 0, 0], [4, 0, 0]).unwrap();
        assert_eq!(back.y.len(), 0);
    }

    #[test]
    fn extreme_values_escape() {
        let codec = small_codec();
        let tables = EntropyTables::new(&codec).unwrap();
        let mut y = Tensor::zeros(&[6, 4, 4]);
        y.data_mut()[0] = 1e9;
        y.data_mut()[5] = -123_456.0;
        let mut z = Tensor::zeros(&[4, 1, 1]);
        z.data_mut()[1] = -5000.0;
        let code = latent_code(&codec, y, z).unwrap();
        let coded = entropy_code(&code, &codec, &tables).unwrap();
        let back = entropy_decode(&coded, &codec, &tables, [6, 4, 4], [4, 1, 1]).unwrap();
        assert_eq!(back.y, code.y);
        assert_eq!(back.z, code.z);
    }
}
