//! Layer-string architectures such as `64C3-128C3-MP2-128C3-MP2-FC` and their
//! width-scaled execution plans.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::factorized::{scaled_width, LayerGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// `<channels>C<kernel>`: same-padded, stride-1 convolution followed by LIF.
    Conv { channels: usize, kernel: usize },
    /// `MP<size>`
    MaxPool { size: usize },
    /// Dense classifier head producing logits.
    Fc,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerString(pub Vec<LayerSpec>);

impl FromStr for LayerString {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |tok: &str| Error::Argument(format!("bad layer token `{tok}` in `{s}`"));
        let mut layers = Vec::new();
        for tok in s.split('-').map(str::trim) {
            let upper = tok.to_ascii_uppercase();
            if upper == "FC" {
                layers.push(LayerSpec::Fc);
            } else if let Some(size) = upper.strip_prefix("MP") {
                let size: usize = size.parse().map_err(|_| bad(tok))?;
                if size == 0 {
                    return Err(bad(tok));
                }
                layers.push(LayerSpec::MaxPool { size });
            } else if let Some((c, k)) = upper.split_once('C') {
                let channels: usize = c.parse().map_err(|_| bad(tok))?;
                let kernel: usize = k.parse().map_err(|_| bad(tok))?;
                if channels == 0 || kernel == 0 || kernel % 2 == 0 {
                    return Err(bad(tok));
                }
                layers.push(LayerSpec::Conv { channels, kernel });
            } else {
                return Err(bad(tok));
            }
        }
        if !matches!(layers.first(), Some(LayerSpec::Conv { .. })) {
            return Err(Error::Argument(format!("`{s}` must start with a convolution")));
        }
        if layers.last() != Some(&LayerSpec::Fc)
            || layers.iter().filter(|l| **l == LayerSpec::Fc).count() != 1
        {
            return Err(Error::Argument(format!("`{s}` must end with a single FC head")));
        }
        Ok(Self(layers))
    }
}

impl fmt::Display for LayerString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { channels, kernel } => format!("{channels}C{kernel}"),
                LayerSpec::MaxPool { size } => format!("MP{size}"),
                LayerSpec::Fc => "FC".to_string(),
            })
            .collect();
        f.write_str(&parts.join("-"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A full-width network description; [`Architecture::plan`] resolves it at a
/// given width scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub layers: LayerString,
    pub input: InputShape,
    pub classes: usize,
    pub a1: usize,
    pub a2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvSlot {
    /// First convolution, fed by the raw image; stored dense.
    Stem,
    /// Hidden convolution `i`; stored factorized (or dense in baseline mode).
    Hidden(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Conv {
        slot: ConvSlot,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        height: usize,
        width: usize,
    },
    Pool {
        size: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    Fc {
        in_features: usize,
        classes: usize,
    },
}

/// One synaptic layer for operation counting: `fan_in` incoming connections
/// into each of `neurons` units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComputeLayer {
    pub fan_in: usize,
    pub neurons: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPlan {
    pub scale: f64,
    pub input: InputShape,
    pub classes: usize,
    pub stages: Vec<Stage>,
    pub hidden_geometry: Vec<LayerGeometry>,
}

impl NetworkPlan {
    pub fn conv_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Conv { .. }))
            .count()
    }

    pub fn stem_shape(&self) -> [usize; 3] {
        match self.stages[0] {
            Stage::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => [out_channels, kernel * kernel, in_channels],
            _ => unreachable!("plans start with a convolution"),
        }
    }

    pub fn head_shape(&self) -> [usize; 2] {
        match self.stages.last() {
            Some(Stage::Fc {
                in_features,
                classes,
            }) => [*classes, *in_features],
            _ => unreachable!("plans end with a head"),
        }
    }

    /// Convolutions and the head, in order; pooling is free.
    pub fn compute_layers(&self) -> Vec<ComputeLayer> {
        self.stages
            .iter()
            .filter_map(|s| match *s {
                Stage::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    height,
                    width,
                    ..
                } => Some(ComputeLayer {
                    fan_in: kernel * kernel * in_channels,
                    neurons: out_channels * height * width,
                }),
                Stage::Fc {
                    in_features,
                    classes,
                } => Some(ComputeLayer {
                    fan_in: in_features,
                    neurons: classes,
                }),
                Stage::Pool { .. } => None,
            })
            .collect()
    }
}

impl Architecture {
    pub fn new(layers: &str, input: InputShape, classes: usize, a1: usize, a2: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Argument("need at least two classes".into()));
        }
        if input.is_empty() {
            return Err(Error::Argument("empty input shape".into()));
        }
        Ok(Self {
            layers: layers.parse()?,
            input,
            classes,
            a1,
            a2,
        })
    }

    pub fn hidden_count(&self) -> usize {
        self.layers
            .0
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
            - 1
    }

    pub fn plan(&self, scale: f64) -> Result<NetworkPlan> {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Error::Geometry(format!("scale {scale} outside (0, 1]")));
        }
        let mut stages = Vec::new();
        let mut hidden_geometry = Vec::new();
        let (mut ch, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        let mut full_ch = ch;
        let mut conv_index = 0usize;
        for layer in &self.layers.0 {
            match *layer {
                LayerSpec::Conv { channels, kernel } => {
                    let out = scaled_width(channels, scale);
                    if out == 0 {
                        return Err(Error::Geometry(format!(
                            "{channels} channels vanish at scale {scale}"
                        )));
                    }
                    let slot = if conv_index == 0 {
                        ConvSlot::Stem
                    } else {
                        let g = LayerGeometry {
                            out_channels: channels,
                            in_channels: full_ch,
                            kernel,
                            a1: self.a1,
                            a2: self.a2,
                            scale,
                            scale_input: true,
                        };
                        let dims = g.validate()?;
                        debug_assert_eq!(dims.in_channels, ch);
                        hidden_geometry.push(g);
                        ConvSlot::Hidden(conv_index - 1)
                    };
                    stages.push(Stage::Conv {
                        slot,
                        in_channels: ch,
                        out_channels: out,
                        kernel,
                        height: h,
                        width: w,
                    });
                    ch = out;
                    full_ch = channels;
                    conv_index += 1;
                }
                LayerSpec::MaxPool { size } => {
                    if h % size != 0 || w % size != 0 {
                        return Err(Error::Geometry(format!(
                            "{h}x{w} feature map not divisible by pool {size}"
                        )));
                    }
                    stages.push(Stage::Pool {
                        size,
                        channels: ch,
                        height: h,
                        width: w,
                    });
                    h /= size;
                    w /= size;
                }
                LayerSpec::Fc => stages.push(Stage::Fc {
                    in_features: ch * h * w,
                    classes: self.classes,
                }),
            }
        }
        Ok(NetworkPlan {
            scale,
            input: self.input,
            classes: self.classes,
            stages,
            hidden_geometry,
        })
    }
}
