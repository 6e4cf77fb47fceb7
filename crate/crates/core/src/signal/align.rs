use super::{F0Contour, SignalError};

/// Nearest-neighbour resampling to `target_frames`. Output frame `i` takes
/// input frame `round(i * T_in / T_out)`, clamped to the last frame.
pub fn align_f0_to_frames(f0: &F0Contour, target_frames: usize) -> Result<F0Contour, SignalError> {
    let n = f0.len();
    if n == 0 {
        return Err(SignalError::EmptyContour);
    }
    let map = |i: usize| ((2 * i * n + target_frames) / (2 * target_frames)).min(n - 1);
    Ok(F0Contour {
        hz: (0..target_frames).map(|i| f0.hz[map(i)]).collect(),
        voiced: (0..target_frames).map(|i| f0.voiced[map(i)]).collect(),
    })
}
