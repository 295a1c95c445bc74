//! Image feature extractors: a multilayer CNN over pixels and a trainable
//! projection over precomputed feature vectors.

mod conv;
mod pool;

pub use conv::{conv2d, ConvLayer};
pub use pool::{maxpool2, maxpool2_backward, maxpool2_with_indices};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{apply_dropout, apply_mask, join, relu_backward_in_place, relu_in_place, Dense, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Pixels as `[H × W × C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Tensor,
}

impl Image {
    /// Clamps every value into `[0, 1]`.
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || !(s[2] == 1 || s[2] == 3) || s[0] == 0 || s[1] == 0 {
            return Err(Error::Format(format!("image must be H×W×{{1,3}}, got {s:?}")));
        }
        Ok(Image {
            pixels: pixels.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Reads binary PPM (`P6`) or PGM (`P5`) with 8-bit samples.
    pub fn read_pnm(r: &mut impl BufRead, origin: &str) -> Result<Self> {
        let fmt = |msg: String| Error::Format(format!("{origin}: {msg}"));
        let magic = read_header_token(r).map_err(|e| fmt(e.to_string()))?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            other => return Err(fmt(format!("unsupported image magic {other:?}"))),
        };
        let mut fields = [0usize; 3];
        for f in fields.iter_mut() {
            let tok = read_header_token(r).map_err(|e| fmt(e.to_string()))?;
            *f = tok.parse().map_err(|_| fmt(format!("bad header field {tok:?}")))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(fmt("empty image".into()));
        }
        if maxval == 0 || maxval > 255 {
            return Err(fmt(format!("only 8-bit images are supported (maxval {maxval})")));
        }
        let mut raw = vec![0u8; width * height * channels];
        r.read_exact(&mut raw).map_err(|e| fmt(format!("truncated pixel data: {e}")))?;
        let scale = maxval as f64;
        let data = raw.iter().map(|&b| b as f64 / scale).collect();
        Image::new(Tensor::new(vec![height, width, channels], data)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Image::read_pnm(&mut BufReader::new(file), &path.display().to_string())
    }

    /// Writes `P6`/`P5` with maxval 255, rounding to the nearest level.
    pub fn write_pnm(&self, w: &mut impl Write) -> std::io::Result<()> {
        let magic = if self.channels() == 3 { "P6" } else { "P5" };
        write!(w, "{magic}\n{} {}\n255\n", self.width(), self.height())?;
        let bytes: Vec<u8> = self
            .pixels
            .data()
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Image {
        if height == self.height() && width == self.width() {
            return self.clone();
        }
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let src = self.pixels.data();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let sy = (y * h / height).min(h - 1);
            for x in 0..width {
                let sx = (x * w / width).min(w - 1);
                let p = (sy * w + sx) * c;
                data.extend_from_slice(&src[p..p + c]);
            }
        }
        Image {
            pixels: Tensor::new(vec![height, width, c], data).expect("resize shape"),
        }
    }
}

fn read_header_token(r: &mut impl BufRead) -> std::io::Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        let ch = byte[0];
        if ch == b'#' && tok.is_empty() {
            let mut skip = Vec::new();
            r.read_until(b'\n', &mut skip)?;
        } else if ch.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(ch as char);
        }
    }
}

/// Which image extractor a member uses, numbered 1 and 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ImageExtractorKind {
    Cnn = 1,
    Projection = 2,
}

impl ImageExtractorKind {
    pub const ALL: [ImageExtractorKind; 2] = [ImageExtractorKind::Cnn, ImageExtractorKind::Projection];

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            1 => Ok(ImageExtractorKind::Cnn),
            2 => Ok(ImageExtractorKind::Projection),
            _ => Err(Error::Config(format!("image extractor id must be 1 or 2, got {id}"))),
        }
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ImageExtractorKind::Cnn => "cnn",
            ImageExtractorKind::Projection => "projection",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CnnConfig {
    pub layers: usize,
    pub filters: usize,
    pub kernel: usize,
    pub channels: usize,
    /// Square input side length.
    pub size: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("CNN needs at least one convolution layer".into()));
        }
        if self.filters == 0 {
            return Err(Error::Config("CNN filter count must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("filter length must be odd, got {}", self.kernel)));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::Config(format!("image channels must be 1 or 3, got {}", self.channels)));
        }
        let mut side = self.size;
        for layer in 0..self.layers {
            if side < self.kernel {
                return Err(Error::Config(format!(
                    "conv layer {} sees a {side}×{side} map, smaller than the filter length {}",
                    layer + 1,
                    self.kernel
                )));
            }
            if layer % 2 == 1 {
                side = side.div_ceil(2);
            }
        }
        Ok(())
    }

    /// A pool follows every second convolution.
    pub fn pool_count(&self) -> usize {
        self.layers / 2
    }

    /// Spatial side after all pools: `⌈size / 2^k⌉`.
    pub fn output_side(&self) -> usize {
        (0..self.pool_count()).fold(self.size, |s, _| s.div_ceil(2))
    }

    pub fn feature_dim(&self) -> usize {
        let side = self.output_side();
        side * side * self.filters
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnExtractor {
    pub convs: Vec<ConvLayer>,
}

impl Params for CnnExtractor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.convs.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        self.convs.visit_mut(f);
    }
}

pub struct CnnCache {
    conv_inputs: Vec<Tensor>,
    conv_outputs: Vec<Tensor>,
    pools: Vec<Option<(Vec<usize>, Vec<usize>)>>,
    mask: Option<Vec<f64>>,
}

impl CnnExtractor {
    pub fn new(config: &CnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.layers);
        let mut channels = config.channels;
        for _ in 0..config.layers {
            convs.push(ConvLayer::new(channels, config.filters, config.kernel, rng)?);
            channels = config.filters;
        }
        Ok(CnnExtractor { convs })
    }

    pub fn zeros(config: &CnnConfig) -> Result<Self> {
        config.validate()?;
        let mut channels = config.channels;
        let convs = (0..config.layers)
            .map(|_| {
                let layer = ConvLayer::zeros(channels, config.filters, config.kernel);
                channels = config.filters;
                layer
            })
            .collect();
        Ok(CnnExtractor { convs })
    }

    /// Convolutions with a 2×2 max pool after every second one, flattened.
    pub fn forward(&self, image: &Tensor, rate: f64, rng: Option<&mut Rng>) -> Result<(Vec<f64>, CnnCache)> {
        if self.convs.is_empty() {
            return Err(Error::Config("CNN needs at least one convolution layer".into()));
        }
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut conv_outputs = Vec::with_capacity(self.convs.len());
        let mut pools = Vec::with_capacity(self.convs.len());
        let mut current = image.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let out = conv.forward(&current)?;
            conv_inputs.push(current);
            let next = if (i + 1) % 2 == 0 {
                let (pooled, winners) = maxpool2_with_indices(&out);
                pools.push(Some((out.shape().to_vec(), winners)));
                pooled
            } else {
                pools.push(None);
                out.clone()
            };
            conv_outputs.push(out);
            current = next;
        }
        let mut feature = current.into_data();
        let mask = apply_dropout(&mut feature, rate, rng);
        Ok((
            feature,
            CnnCache {
                conv_inputs,
                conv_outputs,
                pools,
                mask,
            },
        ))
    }

    pub fn backward(&self, cache: &CnnCache, d_feature: &[f64], grads: &mut CnnExtractor) -> Tensor {
        let mut d = d_feature.to_vec();
        apply_mask(&mut d, cache.mask.as_ref());
        let last = cache.conv_outputs.len() - 1;
        let top_shape = match &cache.pools[last] {
            Some((shape, _)) => vec![shape[0].div_ceil(2), shape[1].div_ceil(2), shape[2]],
            None => cache.conv_outputs[last].shape().to_vec(),
        };
        let mut grad = Tensor::new(top_shape, d).expect("feature gradient shape");
        for i in (0..self.convs.len()).rev() {
            if let Some((shape, winners)) = &cache.pools[i] {
                grad = maxpool2_backward(shape, winners, &grad);
            }
            grad = self.convs[i].backward(&cache.conv_inputs[i], &cache.conv_outputs[i], &grad, &mut grads.convs[i]);
        }
        grad
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub vector: Tensor,
    pub extractor_id: usize,
}

pub enum ImageInput<'a> {
    Pixels(&'a Tensor),
    Features(&'a Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ImageExtractor {
    Cnn(CnnExtractor),
    Projection(Dense),
}

impl Params for ImageExtractor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            ImageExtractor::Cnn(cnn) => cnn.visit(&join(prefix, "cnn"), f),
            ImageExtractor::Projection(dense) => dense.visit(&join(prefix, "projection"), f),
        }
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Tensor)) {
        match self {
            ImageExtractor::Cnn(cnn) => cnn.visit_mut(f),
            ImageExtractor::Projection(dense) => dense.visit_mut(f),
        }
    }
}

pub enum ImageCache {
    Cnn(CnnCache),
    Projection {
        input: Vec<f64>,
        output: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

impl ImageExtractor {
    pub fn kind(&self) -> ImageExtractorKind {
        match self {
            ImageExtractor::Cnn(_) => ImageExtractorKind::Cnn,
            ImageExtractor::Projection(_) => ImageExtractorKind::Projection,
        }
    }

    pub fn forward(&self, input: ImageInput<'_>, rate: f64, rng: Option<&mut Rng>) -> Result<(Vec<f64>, ImageCache)> {
        match (self, input) {
            (ImageExtractor::Cnn(cnn), ImageInput::Pixels(px)) => {
                let (feature, cache) = cnn.forward(px, rate, rng)?;
                Ok((feature, ImageCache::Cnn(cache)))
            }
            (ImageExtractor::Projection(dense), ImageInput::Features(v)) => {
                let input = v.data().to_vec();
                let mut output = dense.forward(&input)?;
                relu_in_place(&mut output);
                let mut feature = output.clone();
                let mask = apply_dropout(&mut feature, rate, rng);
                Ok((feature, ImageCache::Projection { input, output, mask }))
            }
            (extractor, _) => Err(Error::Usage(format!(
                "{} extractor received the wrong kind of image input",
                extractor.kind().name()
            ))),
        }
    }

    pub fn backward(&self, cache: &ImageCache, d_feature: &[f64], grads: &mut ImageExtractor) -> Tensor {
        match (self, cache, grads) {
            (ImageExtractor::Cnn(cnn), ImageCache::Cnn(c), ImageExtractor::Cnn(g)) => cnn.backward(c, d_feature, g),
            (ImageExtractor::Projection(dense), ImageCache::Projection { input, output, mask }, ImageExtractor::Projection(g)) => {
                let mut d = d_feature.to_vec();
                apply_mask(&mut d, mask.as_ref());
                relu_backward_in_place(output, &mut d);
                Tensor::vector(dense.backward(input, &d, g))
            }
            _ => panic!("image extractor backward called with mismatched cache or gradient variant"),
        }
    }
}

/// Inference-mode CNN feature of an already resized image.
pub fn cnn_extract(cnn: &CnnExtractor, image: &Image) -> Result<ImageFeature> {
    let (vector, _) = cnn.forward(image.pixels(), 0.0, None)?;
    Ok(ImageFeature {
        vector: Tensor::vector(vector),
        extractor_id: ImageExtractorKind::Cnn.id(),
    })
}

/// `ReLU(W v + b)` over a precomputed image vector.
pub fn projected_feature(projection: &Dense, vec: &Tensor) -> Result<ImageFeature> {
    if vec.len() != projection.input_size() {
        return Err(Error::Format(format!(
            "image feature has {} values but the projection expects {}",
            vec.len(),
            projection.input_size()
        )));
    }
    let mut out = projection.forward(vec.data())?;
    relu_in_place(&mut out);
    Ok(ImageFeature {
        vector: Tensor::vector(out),
        extractor_id: ImageExtractorKind::Projection.id(),
    })
}

/// Reads the whole PNM byte stream from memory.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut reader = BufReader::new(bytes);
    Image::read_pnm(&mut reader, "<memory>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{init_uniform, matvec};

    fn table_cnn() -> CnnConfig {
        CnnConfig {
            layers: 6,
            filters: 64,
            kernel: 3,
            channels: 3,
            size: 64,
        }
    }

    #[test]
    fn table_topology_shape_arithmetic() {
        let cfg = table_cnn();
        assert_eq!(cfg.pool_count(), 3);
        assert_eq!(cfg.output_side(), 8);
        assert_eq!(cfg.feature_dim(), 4096);
    }

    #[test]
    fn shape_law_holds_for_many_configs() {
        for size in [3usize, 5, 7, 16, 17, 31] {
            for layers in 1..=6 {
                let cfg = CnnConfig {
                    layers,
                    filters: 2,
                    kernel: 3,
                    channels: 1,
                    size,
                };
                if cfg.validate().is_err() {
                    let shrunk = (0..(layers - 1) / 2).fold(size, |s, _| s.div_ceil(2));
                    assert!(shrunk < 3, "size {size} layers {layers}");
                    continue;
                }
                let cnn = CnnExtractor::zeros(&cfg).unwrap();
                let (f, _) = cnn.forward(&Tensor::zeros(&[size, size, 1]), 0.0, None).unwrap();
                let k = layers / 2;
                let side = (size as f64 / 2f64.powi(k as i32)).ceil() as usize;
                assert_eq!(f.len(), side * side * 2, "size {size} layers {layers}");
                assert_eq!(f.len(), cfg.feature_dim());
            }
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let mut cfg = table_cnn();
        cfg.layers = 0;
        assert!(matches!(CnnExtractor::new(&cfg, &mut Rng::new(0)), Err(Error::Config(_))));
        let mut cfg = table_cnn();
        cfg.kernel = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_network_zero_feature() {
        let cfg = CnnConfig {
            layers: 2,
            filters: 3,
            kernel: 3,
            channels: 3,
            size: 8,
        };
        let cnn = CnnExtractor::zeros(&cfg).unwrap();
        let img = Image::new(Tensor::full(&[8, 8, 3], 0.9)).unwrap();
        let f = cnn_extract(&cnn, &img).unwrap();
        assert_eq!(f.vector.len(), 48);
        assert!(f.vector.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_cases() {
        let v = Tensor::vector(vec![0.5, -1.0, 2.0]);
        assert_eq!(projected_feature(&Dense::identity(3), &v).unwrap().vector.data(), &[0.5, 0.0, 2.0]);
        let zero = projected_feature(&Dense::zeros(3, 5), &v).unwrap();
        assert_eq!(zero.vector.data(), &[0.0; 5]);
        assert!(matches!(projected_feature(&Dense::zeros(4, 5), &v), Err(Error::Format(_))));

        let mut rng = Rng::new(5);
        let dense = Dense::new(3, 4, &mut rng);
        let got = projected_feature(&dense, &v).unwrap();
        let oracle = matvec(&dense.weight, &v).unwrap();
        for (g, o) in got.vector.data().iter().zip(oracle.data()) {
            assert!((g - o.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn maxpool_never_exceeds_input_max() {
        let mut rng = Rng::new(9);
        for side in 1..8 {
            let x = init_uniform(&mut rng, &[side, side + 1, 2], 3.0).unwrap();
            let pooled = maxpool2(&x);
            let global = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(pooled.data().iter().all(|v| *v <= global));
        }
    }

    #[test]
    fn pnm_round_trip_and_clamp() {
        let px: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 17.0).collect();
        let img = Image::new(Tensor::new(vec![2, 3, 3], px).unwrap()).unwrap();
        let mut buf = Vec::new();
        img.write_pnm(&mut buf).unwrap();
        let back = decode_pnm(&buf).unwrap();
        assert_eq!(back.pixels().shape(), &[2, 3, 3]);
        assert!(back.pixels().max_abs_diff(img.pixels()) <= 0.5 / 255.0 + 1e-12);

        let clamped = Image::new(Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap()).unwrap();
        assert_eq!(clamped.pixels().data(), &[1.0]);

        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let g = decode_pnm(with_comment).unwrap();
        assert_eq!(g.pixels().data(), &[0.0, 1.0]);
        assert!(decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode_pnm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn nearest_resize() {
        let img = Image::new(Tensor::new(vec![2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let big = img.resize_nearest(4, 4);
        assert_eq!(big.pixels().data()[..4], [0.1, 0.1, 0.2, 0.2]);
        assert_eq!(big.pixels().data()[12..], [0.3, 0.3, 0.4, 0.4]);
        assert_eq!(big.resize_nearest(2, 2), img);
    }
}
