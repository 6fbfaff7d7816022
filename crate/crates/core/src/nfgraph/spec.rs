//! Declarative network description and its line-oriented text form.
//!
//! Grammar (one directive per line, `#` starts a comment, fields are
//! whitespace-separated `key=value` pairs):
//!
//! ```text
//! graph        alpha_exp=<int> delta=<real>         (optional, defaults -2 / 3)
//! input        c=<n> h=<n> w=<n>
//! first_conv   c_in=<n> c_out=<n> k=<n>|kh=<n> kw=<n> stride=<n> pad=<n>
//! block_begin  [alpha_exp=<int>]
//! masked_sign  channels=<n>
//! bin_conv     c_in=<n> c_out=<n> k=<n>|kh=<n> kw=<n> stride=<n> pad=<n>
//! qrprelu      channels=<n>
//! rleaky       channels=<n> slope_exp=<int>
//! block_end
//! avgpool2x2
//! flatten
//! last_dense   n_in=<n> n_out=<n>
//! ```
//!
//! A residual block is exactly `block_begin`, `masked_sign`, `bin_conv`, an
//! activation (`qrprelu` or `rleaky`) and `block_end`. The first layer must be
//! `first_conv` and the last `last_dense`; both stay full precision.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Fan-in of one output channel.
    pub fn fan_in(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.fan_in()
    }

    pub fn output(&self, input: Shape3) -> Result<Shape3> {
        if input.c != self.c_in {
            return Err(Error::Graph(format!(
                "convolution expects {} input channels, got {}",
                self.c_in, input.c
            )));
        }
        if self.stride == 0 {
            return Err(Error::Graph("convolution stride must be positive".into()));
        }
        let dim = |n: usize, k: usize| -> Result<usize> {
            if n + 2 * self.pad < k {
                return Err(Error::Graph(format!(
                    "kernel {k} larger than padded input {}",
                    n + 2 * self.pad
                )));
            }
            Ok((n + 2 * self.pad - k) / self.stride + 1)
        };
        Ok(Shape3::new(self.c_out, dim(input.h, self.kh)?, dim(input.w, self.kw)?))
    }
}

/// Negative-branch activation used inside residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    /// Learnable per-channel slope constrained to `2^round(a)`.
    Quantized,
    /// Fixed slope `2^slope_exp` with learnable offsets.
    RLeaky { slope_exp: i32 },
}

impl ActKind {
    /// Parse `quantized` or `rleaky:<exp>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "quantized" || s == "qrprelu" {
            return Ok(ActKind::Quantized);
        }
        if let Some(exp) = s.strip_prefix("rleaky:") {
            let slope_exp = exp
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad rleaky exponent `{exp}`")))?;
            return Ok(ActKind::RLeaky { slope_exp });
        }
        Err(Error::Config(format!(
            "activation must be `quantized` or `rleaky:<exp>`, got `{s}`"
        )))
    }
}

impl fmt::Display for ActKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActKind::Quantized => f.write_str("quantized"),
            ActKind::RLeaky { slope_exp } => write!(f, "rleaky:{slope_exp}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    FirstConv(ConvGeom),
    BlockBegin { alpha_exp: Option<i32> },
    MaskedSign { channels: usize },
    BinConv(ConvGeom),
    Activation { channels: usize, kind: ActKind },
    BlockEnd,
    AvgPool2x2,
    Flatten,
    LastDense { n_in: usize, n_out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSpec {
    pub input: Shape3,
    pub alpha_exp: i32,
    pub delta: f64,
    pub layers: Vec<Layer>,
}

pub const DEFAULT_ALPHA_EXP: i32 = -2;
pub const DEFAULT_DELTA: f64 = 3.0;

/// One residual block after validation.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub index: usize,
    pub alpha_exp: i32,
    pub input: Shape3,
    pub output: Shape3,
    pub conv: ConvGeom,
    pub act: ActKind,
}

impl BlockPlan {
    /// Shortcut halves the resolution with a 2x2 average pool.
    pub fn downsamples(&self) -> bool {
        self.output.h != self.input.h
    }

    /// Shortcut repeats the input channels this many times.
    pub fn channel_repeat(&self) -> usize {
        self.output.c / self.input.c
    }
}

/// Validated execution plan.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Stem { conv: ConvGeom, input: Shape3, output: Shape3 },
    Block(BlockPlan),
    Pool { input: Shape3, output: Shape3 },
    Flatten { len: usize },
    Head { n_in: usize, n_out: usize },
}

fn parse_fields(line_no: usize, parts: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| Error::Spec {
            line: line_no,
            msg: format!("expected key=value, got `{p}`"),
        })?;
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Spec {
                line: line_no,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(map)
}

struct Fields {
    line: usize,
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| Error::Spec {
                line: self.line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    fn req<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        self.take(key)?.ok_or_else(|| Error::Spec {
            line: self.line,
            msg: format!("missing field `{key}`"),
        })
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::Spec {
                line: self.line,
                msg: format!("unknown field `{k}`"),
            });
        }
        Ok(())
    }

    fn conv(&mut self) -> Result<ConvGeom> {
        let k: Option<usize> = self.take("k")?;
        let kh = match self.take("kh")? {
            Some(v) => v,
            None => k.ok_or_else(|| self.missing("k"))?,
        };
        let kw = match self.take("kw")? {
            Some(v) => v,
            None => k.ok_or_else(|| self.missing("k"))?,
        };
        Ok(ConvGeom {
            c_in: self.req("c_in")?,
            c_out: self.req("c_out")?,
            kh,
            kw,
            stride: self.take("stride")?.unwrap_or(1),
            pad: self.take("pad")?.unwrap_or(0),
        })
    }

    fn missing(&self, key: &str) -> Error {
        Error::Spec {
            line: self.line,
            msg: format!("missing field `{key}`"),
        }
    }
}

impl GraphSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut alpha_exp = DEFAULT_ALPHA_EXP;
        let mut delta = DEFAULT_DELTA;
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let mut f = Fields {
                line: line_no,
                map: parse_fields(line_no, &parts[1..])?,
            };
            match parts[0] {
                "graph" => {
                    if let Some(a) = f.take("alpha_exp")? {
                        alpha_exp = a;
                    }
                    if let Some(d) = f.take("delta")? {
                        delta = d;
                    }
                }
                "input" => input = Some(Shape3::new(f.req("c")?, f.req("h")?, f.req("w")?)),
                "first_conv" => layers.push(Layer::FirstConv(f.conv()?)),
                "block_begin" => layers.push(Layer::BlockBegin {
                    alpha_exp: f.take("alpha_exp")?,
                }),
                "masked_sign" => layers.push(Layer::MaskedSign {
                    channels: f.req("channels")?,
                }),
                "bin_conv" => layers.push(Layer::BinConv(f.conv()?)),
                "qrprelu" => layers.push(Layer::Activation {
                    channels: f.req("channels")?,
                    kind: ActKind::Quantized,
                }),
                "rleaky" => layers.push(Layer::Activation {
                    channels: f.req("channels")?,
                    kind: ActKind::RLeaky {
                        slope_exp: f.req("slope_exp")?,
                    },
                }),
                "block_end" => layers.push(Layer::BlockEnd),
                "avgpool2x2" => layers.push(Layer::AvgPool2x2),
                "flatten" => layers.push(Layer::Flatten),
                "last_dense" => layers.push(Layer::LastDense {
                    n_in: f.req("n_in")?,
                    n_out: f.req("n_out")?,
                }),
                other => {
                    return Err(Error::Spec {
                        line: line_no,
                        msg: format!("unknown directive `{other}`"),
                    })
                }
            }
            f.finish()?;
        }
        let input = input.ok_or(Error::Spec {
            line: 0,
            msg: "missing `input` line".into(),
        })?;
        let spec = GraphSpec {
            input,
            alpha_exp,
            delta,
            layers,
        };
        spec.plan()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read spec {}: {e}", path.as_ref().display()))
        })?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` reproduces the spec.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "graph alpha_exp={} delta={}", self.alpha_exp, self.delta);
        let _ = writeln!(s, "input c={} h={} w={}", self.input.c, self.input.h, self.input.w);
        let conv = |g: &ConvGeom| {
            let k = if g.kh == g.kw {
                format!("k={}", g.kh)
            } else {
                format!("kh={} kw={}", g.kh, g.kw)
            };
            format!("c_in={} c_out={} {} stride={} pad={}", g.c_in, g.c_out, k, g.stride, g.pad)
        };
        for l in &self.layers {
            let _ = match l {
                Layer::FirstConv(g) => writeln!(s, "first_conv {}", conv(g)),
                Layer::BlockBegin { alpha_exp: Some(a) } => writeln!(s, "block_begin alpha_exp={a}"),
                Layer::BlockBegin { alpha_exp: None } => writeln!(s, "block_begin"),
                Layer::MaskedSign { channels } => writeln!(s, "masked_sign channels={channels}"),
                Layer::BinConv(g) => writeln!(s, "bin_conv {}", conv(g)),
                Layer::Activation {
                    channels,
                    kind: ActKind::Quantized,
                } => writeln!(s, "qrprelu channels={channels}"),
                Layer::Activation {
                    channels,
                    kind: ActKind::RLeaky { slope_exp },
                } => writeln!(s, "rleaky channels={channels} slope_exp={slope_exp}"),
                Layer::BlockEnd => writeln!(s, "block_end"),
                Layer::AvgPool2x2 => writeln!(s, "avgpool2x2"),
                Layer::Flatten => writeln!(s, "flatten"),
                Layer::LastDense { n_in, n_out } => writeln!(s, "last_dense n_in={n_in} n_out={n_out}"),
            };
        }
        s
    }

    /// Copy with every block activation replaced by `kind`.
    pub fn with_activation(&self, kind: ActKind) -> Self {
        let mut out = self.clone();
        for l in &mut out.layers {
            if let Layer::Activation { kind: k, .. } = l {
                *k = kind;
            }
        }
        out
    }

    pub fn plan(&self) -> Result<Vec<Stage>> {
        self.plan_at(self.input, true)
    }

    /// Validate and resolve shapes for a (possibly different) input size.
    /// With `check_head` false the final dense width is not compared against
    /// the flattened size, which lets audit-only specs be evaluated at other
    /// resolutions.
    pub fn plan_at(&self, input: Shape3, check_head: bool) -> Result<Vec<Stage>> {
        if !(-31..=0).contains(&self.alpha_exp) {
            return Err(Error::Graph(format!(
                "alpha_exp {} must be a non-positive integer >= -31",
                self.alpha_exp
            )));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Graph("mask steepness delta must be positive".into()));
        }
        match self.layers.first() {
            Some(Layer::FirstConv(_)) => {}
            _ => return Err(Error::Graph("first layer must be first_conv (full precision)".into())),
        }
        match self.layers.last() {
            Some(Layer::LastDense { .. }) => {}
            _ => return Err(Error::Graph("last layer must be last_dense (full precision)".into())),
        }
        let mut stages = Vec::new();
        let mut shape = input;
        let mut flat: Option<usize> = None;
        let mut i = 0;
        let mut blocks = 0;
        while i < self.layers.len() {
            let layer = &self.layers[i];
            if flat.is_some() && !matches!(layer, Layer::LastDense { .. }) {
                return Err(Error::Graph(format!("layer {i}: only last_dense may follow flatten")));
            }
            match layer {
                Layer::FirstConv(g) => {
                    if i != 0 {
                        return Err(Error::Graph(format!("layer {i}: first_conv must be the first layer")));
                    }
                    let out = g.output(shape)?;
                    stages.push(Stage::Stem {
                        conv: *g,
                        input: shape,
                        output: out,
                    });
                    shape = out;
                }
                Layer::BlockBegin { alpha_exp } => {
                    let plan = self.block_at(i, blocks, alpha_exp.unwrap_or(self.alpha_exp), shape)?;
                    shape = plan.output;
                    stages.push(Stage::Block(plan));
                    blocks += 1;
                    i += 5;
                    continue;
                }
                Layer::AvgPool2x2 => {
                    if shape.h % 2 != 0 || shape.w % 2 != 0 {
                        return Err(Error::Graph(format!(
                            "layer {i}: avgpool2x2 needs even spatial dims, got {shape}"
                        )));
                    }
                    let out = Shape3::new(shape.c, shape.h / 2, shape.w / 2);
                    stages.push(Stage::Pool { input: shape, output: out });
                    shape = out;
                }
                Layer::Flatten => {
                    flat = Some(shape.len());
                    stages.push(Stage::Flatten { len: shape.len() });
                }
                Layer::LastDense { n_in, n_out } => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::Graph(format!("layer {i}: last_dense must be the last layer")));
                    }
                    let have = flat.unwrap_or(shape.len());
                    if check_head && have != *n_in {
                        return Err(Error::Graph(format!(
                            "last_dense expects {n_in} inputs, graph provides {have}"
                        )));
                    }
                    if *n_out == 0 {
                        return Err(Error::Graph("last_dense needs at least one output".into()));
                    }
                    stages.push(Stage::Head {
                        n_in: *n_in,
                        n_out: *n_out,
                    });
                }
                Layer::MaskedSign { .. } | Layer::BinConv(_) | Layer::Activation { .. } | Layer::BlockEnd => {
                    return Err(Error::Graph(format!(
                        "layer {i}: {layer:?} is only allowed inside a residual block"
                    )))
                }
            }
            i += 1;
        }
        Ok(stages)
    }

    fn block_at(&self, at: usize, index: usize, alpha_exp: i32, input: Shape3) -> Result<BlockPlan> {
        let err = |msg: String| Error::Graph(format!("block starting at layer {at}: {msg}"));
        if !(-31..=0).contains(&alpha_exp) {
            return Err(err(format!("alpha_exp {alpha_exp} must be in -31..=0")));
        }
        let body = self.layers.get(at + 1..at + 5).ok_or_else(|| err("truncated block".into()))?;
        let (sign_c, conv, act_c, act) = match body {
            [Layer::MaskedSign { channels }, Layer::BinConv(g), Layer::Activation { channels: ac, kind }, Layer::BlockEnd] => {
                (*channels, *g, *ac, *kind)
            }
            _ => {
                return Err(err(
                    "expected masked_sign, bin_conv, qrprelu|rleaky, block_end".into(),
                ))
            }
        };
        if sign_c != input.c {
            return Err(err(format!("masked_sign has {sign_c} channels, input has {}", input.c)));
        }
        let output = conv.output(input)?;
        if act_c != output.c {
            return Err(err(format!("activation has {act_c} channels, conv produces {}", output.c)));
        }
        if output.c < input.c || output.c % input.c != 0 {
            return Err(err(format!(
                "output channels {} must be a multiple of input channels {}",
                output.c, input.c
            )));
        }
        let same = output.h == input.h && output.w == input.w;
        let halved = input.h % 2 == 0 && input.w % 2 == 0 && output.h * 2 == input.h && output.w * 2 == input.w;
        if !same && !halved {
            return Err(err(format!(
                "branch maps {input} to {output}; only identity or 2x downsampling shortcuts exist"
            )));
        }
        if let ActKind::RLeaky { slope_exp } = act {
            if !(-31..=31).contains(&slope_exp) {
                return Err(err(format!("rleaky slope_exp {slope_exp} out of range")));
            }
        }
        Ok(BlockPlan {
            index,
            alpha_exp,
            input,
            output,
            conv,
            act,
        })
    }

    pub fn blocks(&self) -> Result<Vec<BlockPlan>> {
        Ok(self
            .plan()?
            .into_iter()
            .filter_map(|s| match s {
                Stage::Block(b) => Some(b),
                _ => None,
            })
            .collect())
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::LastDense { n_out, .. }) => *n_out,
            _ => 0,
        }
    }
}

/// Analytic signal-propagation trace giving the frozen `beta` of every block.
///
/// Starts at Var = 1; a block sees `beta = sqrt(Var)` and adds `alpha^2` to
/// the running variance. Any resolution change (a downsampling block or a
/// standalone pool) resets Var to 1 for whatever follows it.
pub fn init_betas(spec: &GraphSpec) -> Result<Vec<f64>> {
    let mut var = 1.0f64;
    let mut betas = Vec::new();
    for stage in spec.plan()? {
        match stage {
            Stage::Block(b) => {
                betas.push(var.sqrt());
                let alpha = (b.alpha_exp as f64).exp2();
                var += alpha * alpha;
                if b.downsamples() {
                    var = 1.0;
                }
            }
            Stage::Pool { .. } => var = 1.0,
            _ => {}
        }
    }
    Ok(betas)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE_BLOCKS: &str = "
        graph alpha_exp=-2 delta=3
        input c=1 h=8 w=8
        first_conv c_in=1 c_out=4 k=3 stride=1 pad=1
        block_begin
        masked_sign channels=4
        bin_conv c_in=4 c_out=4 k=3 stride=1 pad=1
        qrprelu channels=4
        block_end
        block_begin
        masked_sign channels=4
        bin_conv c_in=4 c_out=4 k=3 stride=1 pad=1
        qrprelu channels=4
        block_end
        block_begin
        masked_sign channels=4
        bin_conv c_in=4 c_out=4 k=3 stride=1 pad=1
        rleaky channels=4 slope_exp=-3
        block_end
        block_begin   # stage transition
        masked_sign channels=4
        bin_conv c_in=4 c_out=8 k=3 stride=2 pad=1
        qrprelu channels=8
        block_end
        block_begin
        masked_sign channels=8
        bin_conv c_in=8 c_out=8 k=3 stride=1 pad=1
        qrprelu channels=8
        block_end
        flatten
        last_dense n_in=128 n_out=3
    ";

    #[test]
    fn parse_and_plan() {
        let spec = GraphSpec::parse(THREE_BLOCKS).unwrap();
        let blocks = spec.blocks().unwrap();
        assert_eq!(blocks.len(), 5);
        assert!(blocks[3].downsamples());
        assert_eq!(blocks[3].channel_repeat(), 2);
        assert_eq!(blocks[2].act, ActKind::RLeaky { slope_exp: -3 });
        assert_eq!(spec.num_classes(), 3);
    }

    #[test]
    fn text_roundtrip() {
        let spec = GraphSpec::parse(THREE_BLOCKS).unwrap();
        let again = GraphSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn betas_follow_variance_trace() {
        let spec = GraphSpec::parse(THREE_BLOCKS).unwrap();
        let betas = init_betas(&spec).unwrap();
        assert_eq!(betas[0], 1.0);
        assert!((betas[1] - 1.0625f64.sqrt()).abs() < 1e-12);
        assert!((betas[1] - 1.03078).abs() < 1e-5);
        assert!((betas[2] - 1.06066).abs() < 1e-5);
        assert!((betas[3] - 1.1875f64.sqrt()).abs() < 1e-12);
        assert_eq!(betas[4], 1.0);
    }

    #[test]
    fn rejects_bad_graphs() {
        let bad_first = "input c=1 h=4 w=4\nflatten\nlast_dense n_in=16 n_out=2\n";
        assert!(matches!(GraphSpec::parse(bad_first), Err(Error::Graph(_))));

        let loose_sign = "input c=1 h=4 w=4\nfirst_conv c_in=1 c_out=2 k=1\nmasked_sign channels=2\nflatten\nlast_dense n_in=32 n_out=2\n";
        assert!(GraphSpec::parse(loose_sign).is_err());

        let wrong_head = "input c=1 h=4 w=4\nfirst_conv c_in=1 c_out=2 k=1\nflatten\nlast_dense n_in=31 n_out=2\n";
        assert!(GraphSpec::parse(wrong_head).is_err());

        let odd_pool = "input c=1 h=5 w=5\nfirst_conv c_in=1 c_out=2 k=1\navgpool2x2\nflatten\nlast_dense n_in=8 n_out=2\n";
        assert!(GraphSpec::parse(odd_pool).is_err());

        let unknown = "input c=1 h=4 w=4 colour=red\n";
        assert!(matches!(GraphSpec::parse(unknown), Err(Error::Spec { line: 1, .. })));

        let frac_alpha = "graph alpha_exp=-2.5\ninput c=1 h=4 w=4\n";
        assert!(matches!(GraphSpec::parse(frac_alpha), Err(Error::Spec { .. })));
    }

    #[test]
    fn activation_override() {
        let spec = GraphSpec::parse(THREE_BLOCKS).unwrap();
        let leaky = spec.with_activation(ActKind::RLeaky { slope_exp: -7 });
        assert!(leaky
            .blocks()
            .unwrap()
            .iter()
            .all(|b| b.act == ActKind::RLeaky { slope_exp: -7 }));
        assert_eq!(ActKind::parse("rleaky:-3").unwrap(), ActKind::RLeaky { slope_exp: -3 });
        assert_eq!(ActKind::parse("quantized").unwrap(), ActKind::Quantized);
        assert!(ActKind::parse("rleaky:x").is_err());
    }
}
