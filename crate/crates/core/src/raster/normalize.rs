use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{GeoRaster, HAND_CHANNEL, RGB_CHANNELS};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStat {
    pub mean: f64,
    pub std: f64,
}

/// Per-channel statistics, kept as two independent groups so that the RGB
/// bands and the HAND band never share a normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub rgb_stats: [ChannelStat; 3],
    pub hand_stats: Option<ChannelStat>,
}

impl ChannelStats {
    pub fn for_channel(&self, name: &str) -> Option<ChannelStat> {
        if name == HAND_CHANNEL {
            return self.hand_stats;
        }
        RGB_CHANNELS.iter().position(|c| *c == name).map(|i| self.rgb_stats[i])
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.rgb_stats.iter().chain(self.hand_stats.iter());
        for (i, s) in all.enumerate() {
            if !(s.std > 0.0) || !s.std.is_finite() || !s.mean.is_finite() {
                return Err(Error::InvalidStats(alloc::format!(
                    "channel {i}: mean {} std {}",
                    s.mean,
                    s.std
                )));
            }
        }
        Ok(())
    }

    /// `(name, stat)` pairs in channel order, for serialization.
    pub fn entries(&self) -> Vec<(String, ChannelStat)> {
        let mut out: Vec<(String, ChannelStat)> =
            RGB_CHANNELS.iter().zip(self.rgb_stats).map(|(n, s)| (String::from(*n), s)).collect();
        if let Some(h) = self.hand_stats {
            out.push((String::from(HAND_CHANNEL), h));
        }
        out
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (&'a str, ChannelStat)>) -> Result<Self> {
        let mut rgb: [Option<ChannelStat>; 3] = [None; 3];
        let mut hand = None;
        for (name, stat) in entries {
            if name == HAND_CHANNEL {
                hand = Some(stat);
            } else if let Some(i) = RGB_CHANNELS.iter().position(|c| *c == name) {
                rgb[i] = Some(stat);
            } else {
                return Err(invalid!("unknown channel {name} in statistics"));
            }
        }
        let get = |i: usize| rgb[i].ok_or_else(|| invalid!("statistics missing channel {}", RGB_CHANNELS[i]));
        let stats = ChannelStats { rgb_stats: [get(0)?, get(1)?, get(2)?], hand_stats: hand };
        stats.validate()?;
        Ok(stats)
    }
}

/// Mean and population standard deviation per channel over `rasters`.
/// Channels are matched by name; HAND statistics are present only when every
/// raster carries a HAND channel.
pub fn compute_stats<'a>(rasters: impl IntoIterator<Item = &'a GeoRaster>) -> Result<ChannelStats> {
    let mut sums = [(0.0f64, 0.0f64, 0u64); 4];
    let mut hand_seen = true;
    let mut any = false;
    for r in rasters {
        any = true;
        for (slot, name) in RGB_CHANNELS.iter().chain(core::iter::once(&HAND_CHANNEL)).enumerate() {
            match r.channel_index(name) {
                Some(c) => {
                    for &v in r.channel(c) {
                        let v = v as f64;
                        sums[slot].0 += v;
                        sums[slot].1 += v * v;
                        sums[slot].2 += 1;
                    }
                }
                None if slot == 3 => hand_seen = false,
                None => return Err(invalid!("raster has no {name} channel")),
            }
        }
    }
    if !any {
        return Err(invalid!("no rasters to compute statistics from"));
    }
    let stat = |(s, sq, n): (f64, f64, u64)| {
        let n = n as f64;
        let mean = s / n;
        let var = (sq / n - mean * mean).max(0.0);
        ChannelStat { mean, std: libm::sqrt(var) }
    };
    let stats = ChannelStats {
        rgb_stats: [stat(sums[0]), stat(sums[1]), stat(sums[2])],
        hand_stats: (hand_seen && sums[3].2 > 0).then(|| stat(sums[3])),
    };
    stats.validate()?;
    Ok(stats)
}

fn apply(tile: &GeoRaster, stats: &ChannelStats, f: impl Fn(f32, ChannelStat) -> f32) -> Result<GeoRaster> {
    stats.validate()?;
    let mut out = tile.clone();
    for (c, name) in tile.channel_names().iter().enumerate() {
        let s = stats
            .for_channel(name)
            .ok_or_else(|| Error::InvalidStats(alloc::format!("no statistics for channel {name}")))?;
        for v in out.channel_mut(c) {
            *v = f(*v, s);
        }
    }
    Ok(out)
}

/// `(x - mean) / std` per channel, RGB and HAND each with their own statistics.
pub fn normalize(tile: &GeoRaster, stats: &ChannelStats) -> Result<GeoRaster> {
    apply(tile, stats, |v, s| ((v as f64 - s.mean) / s.std) as f32)
}

pub fn denormalize(tile: &GeoRaster, stats: &ChannelStats) -> Result<GeoRaster> {
    apply(tile, stats, |v, s| (v as f64 * s.std + s.mean) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use alloc::string::ToString;
    use alloc::vec;

    fn rgbh(px: Vec<f32>) -> GeoRaster {
        let gt = GeoTransform::new(0.0, 0.0, 1.0, -1.0).unwrap();
        let names = ["R", "G", "B", "HAND"].iter().map(|s| s.to_string()).collect();
        GeoRaster::new(2, 2, px, gt, "EPSG:4326", names).unwrap()
    }

    fn stats(m: f64, s: f64, hm: f64, hs: f64) -> ChannelStats {
        let st = ChannelStat { mean: m, std: s };
        ChannelStats { rgb_stats: [st; 3], hand_stats: Some(ChannelStat { mean: hm, std: hs }) }
    }

    #[test]
    fn constant_channel_at_mean_becomes_zero() {
        let r = rgbh(vec![0.5; 16]);
        let n = normalize(&r, &stats(0.5, 0.2, 0.5, 3.0)).unwrap();
        assert!(n.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_within_tolerance() {
        let px: Vec<f32> = (0..16).map(|i| 0.1 + i as f32 * 0.37).collect();
        let r = rgbh(px.clone());
        let s = stats(0.4, 0.21, 7.5, 4.2);
        let back = denormalize(&normalize(&r, &s).unwrap(), &s).unwrap();
        for (a, b) in back.pixels().iter().zip(&px) {
            assert!(((a - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rgb_stats_do_not_touch_hand() {
        let px: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let r = rgbh(px);
        let a = normalize(&r, &stats(0.4, 0.2, 5.0, 2.0)).unwrap();
        let b = normalize(&r, &stats(9.1, 3.3, 5.0, 2.0)).unwrap();
        assert_eq!(a.channel(3), b.channel(3));
        assert_ne!(a.channel(0), b.channel(0));
    }

    #[test]
    fn zero_std_rejected() {
        let r = rgbh(vec![0.0; 16]);
        let err = normalize(&r, &stats(0.0, 0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidStats(_)));
        let err = normalize(&r, &stats(0.0, 1.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidStats(_)));
    }

    #[test]
    fn computed_stats_match_hand_arithmetic() {
        #[rustfmt::skip]
        let r = rgbh(vec![
            0.0, 1.0, 2.0, 3.0,
            1.0, 1.0, 1.0, 1.0,
            0.0, 0.0, 4.0, 4.0,
            10.0, 20.0, 30.0, 40.0,
        ]);
        let s = compute_stats([&r]).unwrap_err();
        // the constant G channel has zero spread
        assert!(matches!(s, Error::InvalidStats(_)));
        let mut r2 = r.clone();
        r2.channel_mut(1).copy_from_slice(&[0.0, 2.0, 0.0, 2.0]);
        let s = compute_stats([&r2]).unwrap();
        assert!((s.rgb_stats[0].mean - 1.5).abs() < 1e-12);
        assert!((s.rgb_stats[0].std - 1.25f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.rgb_stats[2], ChannelStat { mean: 2.0, std: 2.0 });
        assert_eq!(s.hand_stats.unwrap().mean, 25.0);
    }
}
