//! Encoder, recurrent content transfer, skip horizontal connections, global
//! residual blocks and the decoder, plus recursive multi-step generation.

use longscape_tensor::{concat, Conv2dGeom, Element, Tape, Tensor, TensorError, Var};

use crate::error::{Error, Result, StageExt};
use crate::layers::{conv, conv_transpose, norm_act, Act, Bottleneck, Lstm, LstmState};
use crate::params::{Bound, ParamSpec, ParamStore, SpecBuilder};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Side of the square input image.
    pub input: usize,
    pub channels: [usize; 5],
    pub enc_blocks: [usize; 3],
    pub dec_blocks: [usize; 3],
    pub rct_pred_len: usize,
    pub grb_dilations: [usize; 3],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input: 128,
            channels: [64, 128, 256, 512, 1024],
            enc_blocks: [3, 4, 5],
            dec_blocks: [2, 3, 4],
            rct_pred_len: 4,
            grb_dilations: [1, 2, 4],
        }
    }
}

impl GeneratorConfig {
    /// Scales the input side and every channel width by `scale`; the RCT
    /// prediction length follows the latent width.
    pub fn scaled(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("scale must be positive, got {scale}")));
        }
        let base = Self::default();
        let s = |v: usize| (v as f64 * scale).round() as usize;
        let input = s(base.input);
        let cfg = GeneratorConfig {
            input,
            channels: base.channels.map(s),
            rct_pred_len: input / 32,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input == 0 || self.input % 32 != 0 {
            return bad(format!("input size {} must be a positive multiple of 32", self.input));
        }
        if self.rct_pred_len == 0 {
            return bad("rct_pred_len must be at least 1".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 4 != 0) {
            return bad(format!("channel width {c} must be a positive multiple of 4"));
        }
        if self.enc_blocks.contains(&0) {
            return bad("encoder stages need at least one block".into());
        }
        Ok(())
    }

    pub fn latent_hw(&self) -> usize {
        self.input / 32
    }

    /// Width of the generated image.
    pub fn output_width(&self) -> usize {
        self.input * (self.latent_hw() + self.rct_pred_len) / self.latent_hw()
    }

    fn check_full(&self) -> Result<()> {
        if self.rct_pred_len != self.latent_hw() {
            return Err(Error::Config(format!(
                "a full generator pass needs rct_pred_len == input / 32 ({}), got {}",
                self.latent_hw(),
                self.rct_pred_len
            )));
        }
        Ok(())
    }
}

/// Encoder features consumed by the decoder's skip connections.
#[derive(Debug, Clone)]
pub struct SkipSet<T: Element> {
    /// Outputs of the two strided convolutions and the first two residual
    /// stages, from finest to coarsest.
    pub levels: [Var<T>; 4],
    /// The encoder output, which is also the RCT input.
    pub latent: Var<T>,
}

/// One row of the layer trace: label and the `C x H x W` output shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRow {
    pub layer: String,
    pub shape: [usize; 3],
    pub detail: String,
}

fn chw<T: Element>(v: &Var<T>) -> [usize; 3] {
    let s = v.shape();
    [s[1], s[2], s[3]]
}

pub struct Generator {
    pub config: GeneratorConfig,
    encoder_stages: Vec<Vec<Bottleneck>>,
    decoder_stages: Vec<Vec<Bottleneck>>,
    lstms: [Lstm; 2],
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels;
        let encoder_stages = (0..3)
            .map(|s| {
                (0..config.enc_blocks[s])
                    .map(|i| {
                        let (cin, stride) = if i == 0 { (ch[s + 1], 2) } else { (ch[s + 2], 1) };
                        Bottleneck::new(format!("enc.s{s}.b{i}"), cin, ch[s + 2], stride, Act::Leaky)
                    })
                    .collect()
            })
            .collect();
        let decoder_stages = (0..3)
            .map(|s| {
                let c = ch[4 - s];
                (0..config.dec_blocks[s])
                    .map(|i| Bottleneck::new(format!("dec.s{s}.b{i}"), c, c, 1, Act::Relu))
                    .collect()
            })
            .collect();
        let d = Self::rct_dim(&config);
        let lstms = [Lstm::new("rct.lstm0", d, d), Lstm::new("rct.lstm1", d, d)];
        Ok(Generator {
            config,
            encoder_stages,
            decoder_stages,
            lstms,
        })
    }

    /// Length of one flattened feature column fed to the LSTMs.
    fn rct_dim(config: &GeneratorConfig) -> usize {
        config.channels[4] / 4 * config.latent_hw()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let ch = self.config.channels;
        let mut b = SpecBuilder::new();
        b.conv("enc.conv1", ch[0], 3, (4, 4));
        b.norm("enc.n2", ch[0]);
        b.conv("enc.conv2", ch[1], ch[0], (4, 4));
        for block in self.encoder_stages.iter().flatten() {
            block.declare(&mut b);
        }

        let c = ch[4];
        b.norm("rct.n", c);
        b.conv("rct.reduce", c / 4, c, (1, 1));
        for l in &self.lstms {
            l.declare(&mut b);
        }
        b.conv("rct.expand", c, c / 4, (1, 1));

        for s in 0..3 {
            let c = ch[4 - s];
            if s > 0 {
                shc_declare(&mut b, &format!("dec.shc{s}"), c);
            }
            grb_declare(&mut b, &format!("dec.grb{s}"), c);
            for block in &self.decoder_stages[s] {
                block.declare(&mut b);
            }
            b.norm(&format!("dec.up{s}.n"), c);
            b.conv_transpose(&format!("dec.up{s}"), c, ch[3 - s], (4, 4));
        }
        shc_declare(&mut b, "dec.shc3", ch[1]);
        b.norm("dec.up3.n", ch[1]);
        b.conv_transpose("dec.up3", ch[1], ch[0], (4, 4));
        shc_declare(&mut b, "dec.shc4", ch[0]);
        b.norm("dec.up4.n", ch[0]);
        b.conv_transpose("dec.up4", ch[0], 3, (4, 4));
        b.into_specs()
    }

    /// Parameter prefixes owned by each row of the layer trace, in order.
    pub fn row_prefixes(&self) -> Vec<(String, Vec<String>)> {
        let cfg = &self.config;
        let mut rows: Vec<(String, Vec<String>)> = vec![
            ("Conv".into(), vec!["enc.conv1".into()]),
            ("Conv".into(), vec!["enc.n2".into(), "enc.conv2".into()]),
        ];
        for s in 0..3 {
            rows.push((format!("ResBlock x{}", cfg.enc_blocks[s]), vec![format!("enc.s{s}")]));
        }
        rows.push(("RCT".into(), vec!["rct".into()]));
        for s in 0..3 {
            let mut fuse = vec![format!("dec.grb{s}")];
            if s > 0 {
                fuse.insert(0, format!("dec.shc{s}"));
            }
            rows.push(("SHC+GRB".into(), fuse));
            rows.push((format!("ResBlock x{}", cfg.dec_blocks[s]), vec![format!("dec.s{s}")]));
            rows.push(("Trans-Conv".into(), vec![format!("dec.up{s}")]));
        }
        for s in 3..5 {
            rows.push(("SHC".into(), vec![format!("dec.shc{s}")]));
            rows.push(("Trans-Conv".into(), vec![format!("dec.up{s}")]));
        }
        rows
    }

    /// Scalar parameter count of every trace row.
    pub fn row_param_counts(&self) -> Vec<(String, usize)> {
        let specs = self.param_specs();
        self.row_prefixes()
            .into_iter()
            .map(|(label, prefixes)| {
                let n = specs
                    .iter()
                    .filter(|sp| prefixes.iter().any(|p| sp.name.starts_with(&format!("{p}."))))
                    .map(|sp| sp.shape.iter().product::<usize>())
                    .sum();
                (label, n)
            })
            .collect()
    }

    pub fn encode<T: Element>(&self, image: &Var<T>, p: &Bound<T>) -> Result<SkipSet<T>> {
        let n = self.config.input;
        if image.shape().len() != 4 || image.shape()[1..] != [3, n, n] {
            return Err(Error::Stage {
                row: "encoder input".into(),
                source: TensorError::shape("encode", format!("expected B x 3 x {n} x {n}, got {:?}", image.shape())),
            });
        }
        let g = Conv2dGeom::strided(2, 1);
        let e1 = conv(image, p, "enc.conv1", g).stage("conv1")?;
        let h = norm_act(&e1, p, "enc.n2", Act::Leaky).stage("conv2")?;
        let e2 = conv(&h, p, "enc.conv2", g).stage("conv2")?;
        let mut feats = vec![e1, e2];
        for (s, stage) in self.encoder_stages.iter().enumerate() {
            let mut h = feats.last().cloned().expect("nonempty");
            for block in stage {
                h = block.forward(&h, p).stage(format!("encoder resblock stage {s}"))?;
            }
            feats.push(h);
        }
        let latent = feats.pop().expect("five encoder outputs");
        let levels: [Var<T>; 4] = feats.try_into().map_err(|_| Error::Config("encoder depth".into()))?;
        Ok(SkipSet { levels, latent })
    }

    /// Recurrent content transfer: predicts `pred_len` feature columns to the
    /// right of `latent`.
    pub fn rct_forward<T: Element>(&self, latent: &Var<T>, p: &Bound<T>, pred_len: usize) -> Result<Var<T>> {
        let c = self.config.channels[4];
        let hw = self.config.latent_hw();
        let s = latent.shape();
        if s.len() != 4 || s[1] != c || s[2] != hw || s[3] == 0 {
            return Err(TensorError::shape("rct", format!("expected B x {c} x {hw} x W latent, got {s:?}")).into());
        }
        if pred_len == 0 {
            return Err(Error::Config("rct prediction length must be at least 1".into()));
        }
        let (batch, width) = (s[0], s[3]);
        let d = Self::rct_dim(&self.config);
        let h = norm_act(latent, p, "rct.n", Act::Leaky)?;
        let reduced = conv(&h, p, "rct.reduce", Conv2dGeom::default())?;
        let seq = (0..width)
            .map(|j| reduced.slice(3, j, 1)?.reshape(&[batch, d]))
            .collect::<std::result::Result<Vec<_>, _>>()?;

        let tape = latent.tape();
        let (out0, mut st0) = self.lstms[0].forward(&seq, LstmState::zeros(tape, batch, d)?, p)?;
        let (out1, mut st1) = self.lstms[1].forward(&out0, LstmState::zeros(tape, batch, d)?, p)?;

        let mut prev = out1.last().cloned().expect("nonempty sequence");
        let mut columns = Vec::with_capacity(pred_len);
        for _ in 0..pred_len {
            st0 = self.lstms[0].step(&prev, &st0, p)?;
            st1 = self.lstms[1].step(&st0.hidden, &st1, p)?;
            prev = st1.hidden.clone();
            columns.push(prev.reshape(&[batch, c / 4, hw, 1])?);
        }
        let refs: Vec<&Var<T>> = columns.iter().collect();
        let predicted = concat(&refs, 3)?;
        Ok(conv(&predicted, p, "rct.expand", Conv2dGeom::default())?)
    }

    /// Full pass from a `B x 3 x N x N` image to `B x 3 x N x 2N`, recording
    /// every stage output in `trace` when given.
    pub fn forward_traced<T: Element>(
        &self,
        image: &Var<T>,
        p: &Bound<T>,
        mut trace: Option<&mut Vec<TraceRow>>,
    ) -> Result<Var<T>> {
        self.config.check_full()?;
        let cfg = &self.config;
        let mut record = |layer: &str, v: &Var<T>, detail: String| {
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow {
                    layer: layer.to_string(),
                    shape: chw(v),
                    detail,
                });
            }
        };
        let skips = self.encode(image, p)?;
        record("Conv", &skips.levels[0], "4x4, stride=2".into());
        record("Conv", &skips.levels[1], "4x4, stride=2".into());
        for s in 0..3 {
            let v = if s < 2 { &skips.levels[s + 2] } else { &skips.latent };
            record(&format!("ResBlock x{}", cfg.enc_blocks[s]), v, "stride of first block=2".into());
        }
        let rct = self.rct_forward(&skips.latent, p, cfg.rct_pred_len).stage("RCT")?;
        record("RCT", &rct, "None".into());

        let mut h = shc_first(&rct, &skips.latent).stage("SHC+GRB (first)")?;
        for s in 0..3 {
            let rate = cfg.grb_dilations[s];
            if s > 0 {
                h = shc_forward(&h, &skips.levels[4 - s], p, &format!("dec.shc{s}"), Act::Relu)
                    .stage(format!("SHC+GRB (stage {s})"))?;
            }
            h = grb_forward(&h, p, &format!("dec.grb{s}"), rate, Act::Relu).stage(format!("SHC+GRB (stage {s})"))?;
            record("SHC+GRB", &h, format!("dilated rate={rate}"));
            for block in &self.decoder_stages[s] {
                h = block.forward(&h, p).stage(format!("decoder ResBlock x{}", cfg.dec_blocks[s]))?;
            }
            record(&format!("ResBlock x{}", cfg.dec_blocks[s]), &h, "None".into());
            h = self.up(&h, p, s).stage("Trans-Conv")?;
            record("Trans-Conv", &h, "4x4, stride=2".into());
        }
        for (s, skip) in [(3, &skips.levels[1]), (4, &skips.levels[0])] {
            h = shc_forward(&h, skip, p, &format!("dec.shc{s}"), Act::Relu).stage(format!("SHC (stage {s})"))?;
            record("SHC", &h, "None".into());
            h = self.up(&h, p, s).stage("Trans-Conv")?;
            if s == 4 {
                h = h.tanh()?;
            }
            record("Trans-Conv", &h, "4x4, stride=2".into());
        }
        Ok(h)
    }

    fn up<T: Element>(&self, h: &Var<T>, p: &Bound<T>, s: usize) -> std::result::Result<Var<T>, TensorError> {
        let a = norm_act(h, p, &format!("dec.up{s}.n"), Act::Relu)?;
        conv_transpose(&a, p, &format!("dec.up{s}"), 2, 1)
    }

    pub fn forward<T: Element>(&self, image: &Var<T>, p: &Bound<T>) -> Result<Var<T>> {
        self.forward_traced(image, p, None)
    }

    /// Inference on a plain tensor with frozen parameters.
    pub fn predict<T: Element>(&self, image: &Tensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let out = self.forward(&tape.constant(image.clone()), &bound)?;
        Ok(out.value().clone())
    }

    /// Recursive generation: each step predicts one more `N x N` tile from the
    /// previous tile. Leftward steps mirror the leftmost tile, predict and
    /// mirror back.
    pub fn generate_multistep<T: Element>(
        &self,
        image: &Tensor<T>,
        params: &ParamStore<T>,
        steps_right: usize,
        steps_left: usize,
    ) -> Result<Tensor<T>> {
        use longscape_tensor::kernels::{concat as cat, flip, slice_axis};
        let n = self.config.input;
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != s[3] || s[2] != n {
            return Err(Error::Config(format!("multi-step input must be B x 3 x {n} x {n}, got {s:?}")));
        }
        let predict_right = |tile: &Tensor<T>| -> Result<Tensor<T>> {
            let out = self.predict(tile, params)?;
            Ok(slice_axis(&out, 3, n, n)?)
        };

        let mut right = Vec::with_capacity(steps_right);
        let mut tile = image.clone();
        for _ in 0..steps_right {
            tile = predict_right(&tile)?;
            right.push(tile.clone());
        }
        let mut left = Vec::with_capacity(steps_left);
        let mut tile = flip(image, 3)?;
        for _ in 0..steps_left {
            tile = predict_right(&tile)?;
            left.push(flip(&tile, 3)?);
        }
        let parts: Vec<&Tensor<T>> = left.iter().rev().chain(std::iter::once(image)).chain(right.iter()).collect();
        Ok(cat(&parts, 3)?)
    }
}

/// The first skip connection: the RCT input placed to the left of the
/// predicted features.
pub fn shc_first<T: Element>(rct_out: &Var<T>, rct_in: &Var<T>) -> std::result::Result<Var<T>, TensorError> {
    if rct_out.shape()[..3] != rct_in.shape()[..3] {
        return Err(TensorError::shape(
            "shc_first",
            format!("RCT input {:?} and output {:?} differ", rct_in.shape(), rct_out.shape()),
        ));
    }
    concat(&[rct_in, rct_out], 3)
}

pub fn shc_declare(b: &mut SpecBuilder, prefix: &str, c: usize) {
    let h = (c / 2).max(1);
    b.norm(&format!("{prefix}.n1"), 2 * c);
    b.conv(&format!("{prefix}.c1"), h, 2 * c, (1, 1));
    b.norm(&format!("{prefix}.n2"), h);
    b.conv(&format!("{prefix}.c2"), h, h, (3, 3));
    b.norm(&format!("{prefix}.n3"), h);
    b.conv(&format!("{prefix}.c3"), c, h, (1, 1));
}

/// Fuses encoder features into the left half of a decoder feature; the right
/// half passes through.
pub fn shc_forward<T: Element>(
    dec: &Var<T>,
    enc: &Var<T>,
    p: &Bound<T>,
    prefix: &str,
    act: Act,
) -> std::result::Result<Var<T>, TensorError> {
    let (ds, es) = (dec.shape(), enc.shape());
    if ds.len() != 4 || es.len() != 4 || ds[3] % 2 != 0 || es[..3] != ds[..3] || es[3] * 2 != ds[3] {
        return Err(TensorError::shape(
            "shc",
            format!("decoder {ds:?} needs an encoder feature of half its width, got {es:?}"),
        ));
    }
    let half = ds[3] / 2;
    let left = dec.slice(3, 0, half)?;
    let right = dec.slice(3, half, half)?;
    let h = concat(&[&left, enc], 1)?;
    let h = norm_act(&h, p, &format!("{prefix}.n1"), act)?;
    let h = conv(&h, p, &format!("{prefix}.c1"), Conv2dGeom::default())?;
    let h = norm_act(&h, p, &format!("{prefix}.n2"), act)?;
    let h = conv(&h, p, &format!("{prefix}.c2"), Conv2dGeom::strided(1, 1))?;
    let h = norm_act(&h, p, &format!("{prefix}.n3"), act)?;
    let h = conv(&h, p, &format!("{prefix}.c3"), Conv2dGeom::default())?;
    let fused = enc.add(&h)?;
    concat(&[&fused, &right], 3)
}

pub fn grb_declare(b: &mut SpecBuilder, prefix: &str, c: usize) {
    b.norm(&format!("{prefix}.n1"), c);
    b.conv(&format!("{prefix}.c1"), c, c, (1, 7));
    b.norm(&format!("{prefix}.n2"), c);
    b.conv(&format!("{prefix}.c2"), c, c, (3, 1));
}

/// Horizontal 1x7 convolution dilated by `rate`, then a vertical 3x1, both
/// pre-activated, around a residual connection.
pub fn grb_forward<T: Element>(
    x: &Var<T>,
    p: &Bound<T>,
    prefix: &str,
    rate: usize,
    act: Act,
) -> std::result::Result<Var<T>, TensorError> {
    if rate == 0 {
        return Err(TensorError::shape("grb", "dilation rate must be at least 1"));
    }
    let h = norm_act(x, p, &format!("{prefix}.n1"), act)?;
    let h = conv(&h, p, &format!("{prefix}.c1"), grb_horizontal_geom(rate))?;
    let h = norm_act(&h, p, &format!("{prefix}.n2"), act)?;
    let h = conv(&h, p, &format!("{prefix}.c2"), Conv2dGeom::new((1, 1), (1, 0), (1, 1)))?;
    x.add(&h)
}

pub fn grb_horizontal_geom(rate: usize) -> Conv2dGeom {
    Conv2dGeom::new((1, 1), (0, 3 * rate), (1, rate))
}
