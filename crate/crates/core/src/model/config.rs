use crate::error::{invalid, Result};

/// Spatial reduction from input image to feature map.
pub const FEATURE_STRIDE: usize = 8;

/// Number of stride-2 blocks needed to reach [`FEATURE_STRIDE`].
pub const POOLED_BLOCKS: usize = 3;

/// Logit channel holding the foreground score.
pub const FG_CHANNEL: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side length, H = W.
    pub input_size: usize,
    /// Widths of the three conv+pool encoder blocks.
    pub encoder_channels: Vec<usize>,
    /// Width `C` of the final dilated encoder conv, and of the probes.
    pub feature_channels: usize,
    /// Output width of the three fusion convs; the residual adds force this
    /// to equal the width of `F ⊕ Z^f`, i.e. `2·C`.
    pub fusion_channels: usize,
    pub decoder_channels: usize,
    pub aspp_rates: Vec<usize>,
    /// Concatenate the FG/BG attention maps in the second fusion step.
    pub fbaf: bool,
    /// Use the unnormalized `mean(F·M)` probe instead of the mask-weighted mean.
    pub map_raw: bool,
    pub pixel_mean: f32,
    pub pixel_std: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_channels: vec![16, 32, 32],
            feature_channels: 32,
            fusion_channels: 64,
            decoder_channels: 32,
            aspp_rates: vec![1, 2, 4, 8],
            fbaf: true,
            map_raw: false,
            pixel_mean: 0.5,
            pixel_std: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(FEATURE_STRIDE) {
            return Err(invalid!(
                "input_size {} must be a positive multiple of {FEATURE_STRIDE}",
                self.input_size
            ));
        }
        if self.encoder_channels.len() != POOLED_BLOCKS {
            return Err(invalid!(
                "encoder needs exactly {POOLED_BLOCKS} pooled blocks, got {:?}",
                self.encoder_channels
            ));
        }
        if self.encoder_channels.contains(&0) || self.feature_channels == 0 || self.decoder_channels == 0 {
            return Err(invalid!("channel widths must be positive"));
        }
        if self.fusion_channels != 2 * self.feature_channels {
            return Err(invalid!(
                "fusion_channels ({}) must equal 2·feature_channels ({}) for the residual fusion",
                self.fusion_channels,
                2 * self.feature_channels
            ));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates[0] == 0 || self.aspp_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!(
                "aspp_rates must be nonempty, positive and strictly increasing: {:?}",
                self.aspp_rates
            ));
        }
        if self.pixel_std.is_nan() || self.pixel_std <= 0.0 || !self.pixel_mean.is_finite() {
            return Err(invalid!("pixel normalization must have finite mean and positive std"));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / FEATURE_STRIDE
    }

    /// `key=value` pairs in a fixed order; used for checkpoint headers and
    /// config logging.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("input_size", self.input_size.to_string()),
            ("encoder_channels", join(&self.encoder_channels)),
            ("feature_channels", self.feature_channels.to_string()),
            ("fusion_channels", self.fusion_channels.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
            ("aspp_rates", join(&self.aspp_rates)),
            ("fbaf", self.fbaf.to_string()),
            ("map_raw", self.map_raw.to_string()),
            ("pixel_mean", self.pixel_mean.to_string()),
            ("pixel_std", self.pixel_std.to_string()),
            ("fg_channel", FG_CHANNEL.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| invalid!("cannot parse `{key}` value `{v}`"))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            v.split(',').map(|x| parse(key, x.trim())).collect()
        }
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for (k, v) in pairs {
            match k {
                "input_size" => cfg.input_size = parse(k, v)?,
                "encoder_channels" => cfg.encoder_channels = list(k, v)?,
                "feature_channels" => cfg.feature_channels = parse(k, v)?,
                "fusion_channels" => cfg.fusion_channels = parse(k, v)?,
                "decoder_channels" => cfg.decoder_channels = parse(k, v)?,
                "aspp_rates" => cfg.aspp_rates = list(k, v)?,
                "fbaf" => cfg.fbaf = parse(k, v)?,
                "map_raw" => cfg.map_raw = parse(k, v)?,
                "pixel_mean" => cfg.pixel_mean = parse(k, v)?,
                "pixel_std" => cfg.pixel_std = parse(k, v)?,
                "fg_channel" => {
                    let ch: usize = parse(k, v)?;
                    if ch != FG_CHANNEL {
                        return Err(invalid!("foreground channel {ch} is not supported"));
                    }
                }
                other => return Err(invalid!("unknown model config key `{other}`")),
            }
            seen.push(k.to_string());
        }
        for (k, _) in cfg.to_pairs() {
            if !seen.iter().any(|s| s == k) {
                return Err(invalid!("model config key `{k}` missing"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let pairs = cfg.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ModelConfig {
                input_size: 60,
                ..Default::default()
            },
            ModelConfig {
                aspp_rates: vec![],
                ..Default::default()
            },
            ModelConfig {
                aspp_rates: vec![1, 4, 2],
                ..Default::default()
            },
            ModelConfig {
                aspp_rates: vec![0, 1],
                ..Default::default()
            },
            ModelConfig {
                fusion_channels: 48,
                ..Default::default()
            },
            ModelConfig {
                encoder_channels: vec![8, 8],
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn from_pairs_requires_every_key() {
        let pairs = ModelConfig::default().to_pairs();
        let partial = pairs[1..].iter().map(|(k, v)| (*k, v.as_str()));
        assert!(ModelConfig::from_pairs(partial).is_err());
    }
}
