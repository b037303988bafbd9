//! Stacking Based on Time: each of B bins per polarity holds, per pixel, the
//! largest normalized timestamp of the events falling into that bin.

use fetap_tensor::Tensor;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};

/// Event stack over `[t_start, t_end]`, stored as an `(X, Y, 2B)` tensor.
/// Channels `[0, B)` hold positive events, `[B, 2B)` negative ones.
#[derive(Clone, Debug, PartialEq)]
pub struct SbtStack {
    pub tensor: Tensor<f32>,
    pub t_start: u64,
    pub t_end: u64,
    pub bins: usize,
}

impl SbtStack {
    pub fn width(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        2 * self.bins
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        let (h, c) = (self.height(), self.channels());
        self.tensor.data()[(x * h + y) * c + channel]
    }

    /// All-zero stack, used when a window contains no elapsed time.
    pub fn zeros(width: usize, height: usize, bins: usize, t_start: u64, t_end: u64) -> Self {
        Self { tensor: Tensor::zeros(&[width, height, 2 * bins]), t_start, t_end, bins }
    }

    /// Channel-major `(2B, Y, X)` copy, the layout the encoders consume.
    pub fn to_chw(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width(), self.height(), self.channels());
        let src = self.tensor.data();
        let mut out = vec![0.0; src.len()];
        for x in 0..w {
            for y in 0..h {
                let base = (x * h + y) * c;
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = src[base + ch];
                }
            }
        }
        Tensor::new(vec![c, h, w], out).expect("same element count")
    }
}

fn check_window(t_start: u64, t_end: u64, bins: usize) -> Result<()> {
    if t_end <= t_start {
        return Err(Error::DegenerateWindow { t_start, t_end });
    }
    if bins == 0 {
        return Err(Error::Config("SBT needs at least one bin".into()));
    }
    Ok(())
}

/// Normalized timestamp `t*` in `[0, B-1]`.
pub fn normalized_time(t_us: u64, t_start: u64, t_end: u64, bins: usize) -> f64 {
    (t_us - t_start) as f64 / (t_end - t_start) as f64 * (bins - 1) as f64
}

/// Bin receiving `t*`; the final timestamp goes to the last bin.
pub fn bin_of(t_star: f64, bins: usize) -> usize {
    (t_star.floor() as usize).min(bins - 1)
}

fn channel(polarity: Polarity, bin: usize, bins: usize) -> usize {
    match polarity {
        Polarity::Positive => bin,
        Polarity::Negative => bins + bin,
    }
}

/// Triangle kernel `max(0, 1 - |a|)`.
pub fn kernel(a: f64) -> f64 {
    (1.0 - a.abs()).max(0.0)
}

/// Max-splats `t*` at a possibly sub-pixel location. Integer coordinates hit
/// exactly one pixel.
fn splat(data: &mut [f32], w: usize, h: usize, c: usize, x: f64, y: f64, ch: usize, t_star: f64) {
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    for px in [x0, x0 + 1] {
        if px < 0 || px as usize >= w {
            continue;
        }
        let kx = kernel(px as f64 - x);
        if kx == 0.0 {
            continue;
        }
        for py in [y0, y0 + 1] {
            if py < 0 || py as usize >= h {
                continue;
            }
            let ky = kernel(py as f64 - y);
            if ky == 0.0 {
                continue;
            }
            let v = (kx * ky * t_star) as f32;
            let slot = &mut data[(px as usize * h + py as usize) * c + ch];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

/// Builds the stack from events of `stream` within `[t_start, t_end]`; events
/// outside the window are ignored.
pub fn build_sbt(stream: &EventStream, t_start: u64, t_end: u64, bins: usize) -> Result<SbtStack> {
    build_sbt_from(stream.window(t_start, t_end), stream.width(), stream.height(), t_start, t_end, bins)
}

/// As [`build_sbt`] for a time-sorted event slice on a `width` × `height`
/// sensor.
pub fn build_sbt_from(
    events: &[Event],
    width: usize,
    height: usize,
    t_start: u64,
    t_end: u64,
    bins: usize,
) -> Result<SbtStack> {
    check_window(t_start, t_end, bins)?;
    let mut out = SbtStack::zeros(width, height, bins, t_start, t_end);
    let c = out.channels();
    let data = out.tensor.data_mut();
    for e in events {
        if e.t_us < t_start || e.t_us > t_end {
            continue;
        }
        let t_star = normalized_time(e.t_us, t_start, t_end, bins);
        let ch = channel(e.polarity, bin_of(t_star, bins), bins);
        splat(data, width, height, c, e.x as f64, e.y as f64, ch, t_star);
    }
    Ok(out)
}

/// Reference implementation: for every event, visits every pixel and bin of
/// the output and evaluates the defining expression directly.
pub fn sbt_oracle(stream: &EventStream, t_start: u64, t_end: u64, bins: usize) -> Result<SbtStack> {
    check_window(t_start, t_end, bins)?;
    let (w, h, c) = (stream.width(), stream.height(), 2 * bins);
    let mut values = vec![vec![vec![0.0f32; c]; h]; w];
    for e in stream.events() {
        if e.t_us < t_start || e.t_us > t_end {
            continue;
        }
        let t_star = (e.t_us - t_start) as f64 / (t_end - t_start) as f64 * (bins - 1) as f64;
        let half = if e.polarity == Polarity::Positive { 0 } else { bins };
        for (x, column) in values.iter_mut().enumerate() {
            for (y, cell) in column.iter_mut().enumerate() {
                for b in 0..bins {
                    let in_bin = if b == bins - 1 { t_star >= b as f64 } else { t_star >= b as f64 && t_star < (b + 1) as f64 };
                    if !in_bin {
                        continue;
                    }
                    let kx = (1.0 - (x as f64 - e.x as f64).abs()).max(0.0);
                    let ky = (1.0 - (y as f64 - e.y as f64).abs()).max(0.0);
                    let v = (kx * ky * t_star) as f32;
                    if v > cell[half + b] {
                        cell[half + b] = v;
                    }
                }
            }
        }
    }
    let data = values.into_iter().flatten().flatten().collect();
    Ok(SbtStack { tensor: Tensor::new(vec![w, h, c], data)?, t_start, t_end, bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(8, 6, events).unwrap()
    }

    #[test]
    fn empty_stream_gives_zeros() {
        let s = build_sbt(&stream(vec![]), 0, 1000, 5).unwrap();
        assert_eq!(s.tensor.shape(), &[8, 6, 10]);
        assert!(s.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_event_lands_in_bin_two() {
        let s = build_sbt(&stream(vec![Event::new(3, 4, 500, Polarity::Positive)]), 0, 1000, 5).unwrap();
        assert_eq!(s.get(3, 4, 2), 2.0);
        let nonzero = s.tensor.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn later_event_in_same_bin_wins() {
        let ev = vec![Event::new(3, 4, 500, Polarity::Positive), Event::new(3, 4, 700, Polarity::Positive)];
        let s = build_sbt(&stream(ev), 0, 1000, 5).unwrap();
        assert_eq!(s.get(3, 4, 2), 2.8);
    }

    #[test]
    fn window_end_goes_to_last_bin_and_negatives_to_upper_half() {
        let ev = vec![Event::new(0, 0, 1000, Polarity::Negative)];
        let s = build_sbt(&stream(ev), 0, 1000, 5).unwrap();
        assert_eq!(s.get(0, 0, 9), 4.0);
    }

    #[test]
    fn degenerate_window_is_an_error() {
        assert!(matches!(
            build_sbt(&stream(vec![]), 5, 5, 5),
            Err(Error::DegenerateWindow { t_start: 5, t_end: 5 })
        ));
    }

    #[test]
    fn events_outside_window_ignored() {
        let ev = vec![Event::new(1, 1, 10, Polarity::Positive), Event::new(1, 1, 3000, Polarity::Positive)];
        let s = build_sbt(&stream(ev), 100, 2000, 3).unwrap();
        assert!(s.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn subpixel_splat_spreads_bilinearly() {
        let mut data = vec![0.0; 4 * 4];
        splat(&mut data, 2, 2, 4, 0.5, 0.0, 0, 2.0);
        assert_eq!(data[0], 1.0);
        assert_eq!(data[2 * 4], 1.0);
    }

    #[test]
    fn chw_layout() {
        let ev = vec![Event::new(3, 4, 1000, Polarity::Positive)];
        let s = build_sbt(&stream(ev), 0, 1000, 2).unwrap();
        let chw = s.to_chw();
        assert_eq!(chw.shape(), &[4, 6, 8]);
        assert_eq!(chw.data()[(6 + 4) * 8 + 3], 1.0);
    }
}
