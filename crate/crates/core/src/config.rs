//! Model configuration: variant flags plus scale knobs, read from and
//! written to plain `key=value` text.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Last three backbone downsampling convs become KW convolutions.
    pub kwconv: bool,
    /// Last three backbone C2f blocks become C2f-KW.
    pub c2f_kw: bool,
    /// The PAN neck is replaced by the focus-diffusion pyramid.
    pub fdpn: bool,
    /// The decoupled head is replaced by the shared GN head.
    pub gsdhead: bool,
    pub nc: usize,
    pub width: f64,
    pub depth: f64,
    /// Kernels per warehouse.
    pub k: usize,
    /// WGM reduction ratio.
    pub r: usize,
    pub dw_kernels: Vec<usize>,
    /// Shared head width; `None` picks the narrowest pyramid level.
    pub cs: Option<usize>,
    pub reg_max: usize,
    pub imgsz: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kwconv: false,
            c2f_kw: false,
            fdpn: false,
            gsdhead: false,
            nc: 3,
            width: 0.25,
            depth: 0.33,
            k: 4,
            r: 4,
            dw_kernels: vec![1, 3, 5, 7],
            cs: None,
            reg_max: 16,
            imgsz: 640,
        }
    }
}

/// Variant names in ablation-table order.
pub const VARIANTS: [&str; 10] = [
    "v8n",
    "v8n+kwconv",
    "v8n+c2f-kw",
    "v8n+kwconv+c2f-kw",
    "v8n+fdpn",
    "v8n+gsdhead",
    "v8n+kwconv+c2f-kw+fdpn",
    "v8n+kwconv+c2f-kw+gsdhead",
    "v8n+fdpn+gsdhead",
    "kfg",
];

const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const BASE_DEPTHS: [usize; 4] = [3, 6, 6, 3];
const MAX_CHANNELS: usize = 1024;

/// Round `x` up to a multiple of `divisor`.
pub fn make_divisible(x: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    ((x / d).ceil() * d) as usize
}

impl ModelConfig {
    /// Configuration for a variant name such as `v8n+fdpn+gsdhead` or `kfg`.
    pub fn variant(name: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        cfg.set_variant(name)?;
        Ok(cfg)
    }

    pub fn set_variant(&mut self, name: &str) -> Result<()> {
        let name = name.trim();
        let (kwconv, c2f_kw, fdpn, gsdhead) = if name == "kfg" {
            (true, true, true, true)
        } else {
            let mut parts = name.split('+');
            if parts.next() != Some("v8n") {
                return Err(CoreError::Config(format!(
                    "unknown variant {name:?}: must start with \"v8n\" or be \"kfg\""
                )));
            }
            let mut flags = (false, false, false, false);
            for p in parts {
                let slot = match p {
                    "kwconv" => &mut flags.0,
                    "c2f-kw" => &mut flags.1,
                    "fdpn" => &mut flags.2,
                    "gsdhead" => &mut flags.3,
                    other => {
                        return Err(CoreError::Config(format!(
                            "unknown module {other:?} in variant {name:?}"
                        )))
                    }
                };
                if *slot {
                    return Err(CoreError::Config(format!("module {p:?} repeated in {name:?}")));
                }
                *slot = true;
            }
            flags
        };
        self.kwconv = kwconv;
        self.c2f_kw = c2f_kw;
        self.fdpn = fdpn;
        self.gsdhead = gsdhead;
        Ok(())
    }

    /// Canonical variant name of the flag combination.
    pub fn variant_name(&self) -> String {
        if self.kwconv && self.c2f_kw && self.fdpn && self.gsdhead {
            return "kfg".into();
        }
        let mut s = String::from("v8n");
        for (on, tag) in [
            (self.kwconv, "kwconv"),
            (self.c2f_kw, "c2f-kw"),
            (self.fdpn, "fdpn"),
            (self.gsdhead, "gsdhead"),
        ] {
            if on {
                s.push('+');
                s.push_str(tag);
            }
        }
        s
    }

    /// Small configuration for end-to-end gradient checks and quick tests.
    pub fn tiny(variant: &str) -> Result<Self> {
        let mut cfg = Self::variant(variant)?;
        cfg.width = 0.0625;
        cfg.imgsz = 64;
        Ok(cfg)
    }

    /// Stage widths: stem, then the four backbone stages.
    pub fn widths(&self) -> [usize; 5] {
        BASE_WIDTHS.map(|c| make_divisible(c.min(MAX_CHANNELS) as f64 * self.width, 8))
    }

    /// Bottleneck repeats of the four backbone C2f stages.
    pub fn depths(&self) -> [usize; 4] {
        BASE_DEPTHS.map(|n| self.repeats(n))
    }

    /// Neck C2f repeats.
    pub fn neck_depth(&self) -> usize {
        self.repeats(3)
    }

    fn repeats(&self, n: usize) -> usize {
        ((n as f64 * self.depth).round() as usize).max(1)
    }

    /// Channel widths of P3/P4/P5.
    pub fn level_widths(&self) -> [usize; 3] {
        let w = self.widths();
        [w[2], w[3], w[4]]
    }

    pub fn shared_width(&self) -> usize {
        self.cs
            .unwrap_or_else(|| *self.level_widths().iter().min().expect("three levels"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.nc == 0 {
            return bad("nc must be at least 1".into());
        }
        if !(self.width > 0.0 && self.width.is_finite()) || !(self.depth > 0.0 && self.depth.is_finite()) {
            return bad(format!("width {} and depth {} must be positive", self.width, self.depth));
        }
        if self.imgsz == 0 || !self.imgsz.is_multiple_of(32) {
            return bad(format!("imgsz {} must be a positive multiple of 32", self.imgsz));
        }
        if self.k == 0 || self.r == 0 {
            return bad("K and r must be at least 1".into());
        }
        if self.reg_max < 2 {
            return bad(format!("reg_max {} must be at least 2", self.reg_max));
        }
        if self.dw_kernels.iter().any(|k| k % 2 == 0) {
            return bad(format!("dw_kernels {:?} must be odd", self.dw_kernels));
        }
        if self.cs == Some(0) {
            return bad("cs must be positive".into());
        }
        Ok(())
    }

    /// Parse `key=value` lines. Blank lines and `#` comments are ignored;
    /// unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CoreError::ConfigLine { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "kwconv" => cfg.kwconv = parse_value(value).map_err(err)?,
                "c2f_kw" => cfg.c2f_kw = parse_value(value).map_err(err)?,
                "fdpn" => cfg.fdpn = parse_value(value).map_err(err)?,
                "gsdhead" => cfg.gsdhead = parse_value(value).map_err(err)?,
                "nc" => cfg.nc = parse_value(value).map_err(err)?,
                "width" => cfg.width = parse_value(value).map_err(err)?,
                "depth" => cfg.depth = parse_value(value).map_err(err)?,
                "K" => cfg.k = parse_value(value).map_err(err)?,
                "r" => cfg.r = parse_value(value).map_err(err)?,
                "dw_kernels" => {
                    cfg.dw_kernels = value
                        .split(',')
                        .map(|v| parse_value(v.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(err)?
                }
                "cs" => {
                    cfg.cs = if value == "auto" {
                        None
                    } else {
                        Some(parse_value(value).map_err(err)?)
                    }
                }
                "reg_max" => cfg.reg_max = parse_value(value).map_err(err)?,
                "imgsz" => cfg.imgsz = parse_value(value).map_err(err)?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kernels: Vec<String> = self.dw_kernels.iter().map(ToString::to_string).collect();
        let cs = self.cs.map_or("auto".to_string(), |c| c.to_string());
        for (k, v) in [
            ("kwconv", self.kwconv.to_string()),
            ("c2f_kw", self.c2f_kw.to_string()),
            ("fdpn", self.fdpn.to_string()),
            ("gsdhead", self.gsdhead.to_string()),
            ("nc", self.nc.to_string()),
            ("width", self.width.to_string()),
            ("depth", self.depth.to_string()),
            ("K", self.k.to_string()),
            ("r", self.r.to_string()),
            ("dw_kernels", kernels.join(",")),
            ("cs", cs),
            ("reg_max", self.reg_max.to_string()),
            ("imgsz", self.imgsz.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn parse_value<V: FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse()
        .map_err(|_| format!("cannot parse {v:?} as {}", std::any::type_name::<V>()))
}
