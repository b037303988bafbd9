//! Output slice grid and how each slice pairs with a frame and an event window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScheduleEntry {
    pub t_frame: u64,
    pub t_slice: u64,
}

impl ScheduleEntry {
    /// Time elapsed since the paired frame.
    pub fn since_frame(&self) -> u64 {
        self.t_slice - self.t_frame
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSchedule {
    pub entries: Vec<ScheduleEntry>,
    pub dt_us: u64,
}

impl SliceSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Slices at `t_begin, t_begin + dt, ...` up to `t_finish`, each paired with
/// the latest frame at or before it.
pub fn make_schedule(frame_times: &[u64], t_begin: u64, t_finish: u64, dt_us: u64) -> Result<SliceSchedule> {
    if dt_us == 0 {
        return Err(Error::Config("slice step must be positive".into()));
    }
    if frame_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Ordering("frame timestamps are not sorted".into()));
    }
    if t_finish < t_begin {
        return Err(Error::Usage(format!("range end {t_finish} us precedes start {t_begin} us")));
    }
    if frame_times.first().is_none_or(|&f| f > t_begin) {
        return Err(Error::Usage(format!("no frame at or before {t_begin} us")));
    }
    let mut entries = Vec::new();
    let mut f = 0;
    let mut t = t_begin;
    loop {
        while f + 1 < frame_times.len() && frame_times[f + 1] <= t {
            f += 1;
        }
        entries.push(ScheduleEntry { t_frame: frame_times[f], t_slice: t });
        match t.checked_add(dt_us) {
            Some(next) if next <= t_finish => t = next,
            _ => break,
        }
    }
    Ok(SliceSchedule { entries, dt_us })
}

/// How far back a slice's event window reaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AccumulateMode {
    /// Everything since the paired frame.
    SinceFrame,
    /// A fixed-length window ending at the slice.
    Fixed { window_us: u64 },
}

impl AccumulateMode {
    /// Event window `[start, end]` for a slice.
    pub fn window(&self, entry: &ScheduleEntry) -> (u64, u64) {
        match *self {
            AccumulateMode::SinceFrame => (entry.t_frame, entry.t_slice),
            AccumulateMode::Fixed { window_us } => (entry.t_slice.saturating_sub(window_us), entry.t_slice),
        }
    }

    /// Accumulated duration fed to the time encoding.
    pub fn duration(&self, entry: &ScheduleEntry) -> u64 {
        let (a, b) = self.window(entry);
        b - a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_frames_twenty_one_slices() {
        let s = make_schedule(&[0, 50_000], 0, 100_000, 5_000).unwrap();
        assert_eq!(s.len(), 21);
        for e in &s.entries {
            let expect = if e.t_slice < 50_000 { 0 } else { 50_000 };
            assert_eq!(e.t_frame, expect);
        }
    }

    #[test]
    fn step_longer_than_range_gives_one_slice() {
        let s = make_schedule(&[0], 10, 20, 1_000_000).unwrap();
        assert_eq!(s.entries, vec![ScheduleEntry { t_frame: 0, t_slice: 10 }]);
    }

    #[test]
    fn twenty_four_hz_frames_at_two_hundred_hz() {
        let frames: Vec<u64> = (0..25).map(|i| (i as f64 * 1e6 / 24.0).round() as u64).collect();
        let s = make_schedule(&frames, 0, 1_000_000, 5_000).unwrap();
        assert_eq!(s.len(), 201);
        let per_frame = s.entries.iter().filter(|e| e.t_frame == 0).count();
        assert_eq!(per_frame, 9);
    }

    #[test]
    fn no_frame_before_start_is_usage_error() {
        assert!(matches!(make_schedule(&[100], 0, 1000, 10), Err(Error::Usage(_))));
    }

    #[test]
    fn fixed_window_clamps_at_zero() {
        let e = ScheduleEntry { t_frame: 0, t_slice: 3_000 };
        assert_eq!(AccumulateMode::Fixed { window_us: 5_000 }.window(&e), (0, 3_000));
        assert_eq!(AccumulateMode::SinceFrame.duration(&ScheduleEntry { t_frame: 10, t_slice: 40 }), 30);
    }
}
