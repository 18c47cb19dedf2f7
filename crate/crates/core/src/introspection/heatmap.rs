use super::{csv_values, IntrospectionError};
use crate::model::AttentionTensor;

/// Attention received per key frame in the last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    /// Sum over heads and queries of the last layer's scores.
    pub raw: Vec<f32>,
    /// `raw` min-max normalised to `[0, 1]` (all zero when constant).
    pub values: Vec<f32>,
}

impl HeatMap {
    /// A single line of the raw values.
    pub fn to_csv(&self) -> String {
        format!("{}\n", csv_values(&self.raw))
    }
}

/// Maps values linearly onto `[0, 1]`; a constant input maps to zeros.
pub fn min_max_normalize(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn attention_heatmap(captured: &AttentionTensor) -> Result<HeatMap, IntrospectionError> {
    if captured.n_layers() == 0 || captured.n_heads() == 0 {
        return Err(IntrospectionError::Contract("no captured attention layers".into()));
    }
    let t = captured.frames();
    let last = captured.n_layers() - 1;
    let mut raw = vec![0.0f32; t];
    for h in 0..captured.n_heads() {
        for row in captured.head(last, h).chunks(t) {
            for (r, s) in raw.iter_mut().zip(row) {
                *r += s;
            }
        }
    }
    let values = min_max_normalize(&raw);
    Ok(HeatMap { raw, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(t: usize) -> Vec<f32> {
        (0..t * t).map(|i| if i / t == i % t { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_heads_give_all_zero_map() {
        let a = AttentionTensor::new(6, vec![vec![eye(6); 3]]).unwrap();
        let m = attention_heatmap(&a).unwrap();
        assert_eq!(m.raw, vec![3.0; 6]);
        assert_eq!(m.values, vec![0.0; 6]);
    }

    #[test]
    fn one_hot_column_concentrates() {
        let t = 8;
        let col5: Vec<f32> = (0..t * t).map(|i| if i % t == 5 { 1.0 } else { 0.0 }).collect();
        // Only the last layer counts.
        let a = AttentionTensor::new(t, vec![vec![eye(t), eye(t)], vec![col5.clone(), col5]]).unwrap();
        let m = attention_heatmap(&a).unwrap();
        let want: Vec<f32> = (0..t).map(|i| if i == 5 { 1.0 } else { 0.0 }).collect();
        assert_eq!(m.values, want);
    }

    #[test]
    fn three_frame_hand_fixture() {
        let a = AttentionTensor::new(3, vec![vec![vec![0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.0, 0.0, 1.0]]]).unwrap();
        let m = attention_heatmap(&a).unwrap();
        for (got, want) in m.raw.iter().zip([0.6, 1.05, 1.35]) {
            assert!((got - want).abs() < 1e-6, "{:?}", m.raw);
        }
        for (got, want) in m.values.iter().zip([0.0, 0.6, 1.0]) {
            assert!((got - want).abs() < 1e-6, "{:?}", m.values);
        }
    }

    #[test]
    fn head_order_does_not_matter() {
        let t = 5;
        let heads: Vec<Vec<f32>> = (0..4)
            .map(|h| {
                (0..t * t)
                    .map(|i| ((i * 7 + h * 3) % 11) as f32)
                    .collect::<Vec<f32>>()
                    .chunks(t)
                    .flat_map(|r| {
                        let s: f32 = r.iter().sum();
                        r.iter().map(move |v| v / s).collect::<Vec<_>>()
                    })
                    .collect()
            })
            .collect();
        let mut rev = heads.clone();
        rev.reverse();
        let a = attention_heatmap(&AttentionTensor::new(t, vec![heads]).unwrap()).unwrap();
        let b = attention_heatmap(&AttentionTensor::new(t, vec![rev]).unwrap()).unwrap();
        for (x, y) in a.raw.iter().zip(&b.raw) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_is_one_line_of_raw_values() {
        let a = AttentionTensor::new(3, vec![vec![vec![0.5, 0.25, 0.25, 0.1, 0.8, 0.1, 0.0, 0.0, 1.0]]]).unwrap();
        let csv = attention_heatmap(&a).unwrap().to_csv();
        assert_eq!(csv.lines().count(), 1);
        let parsed: Vec<f32> = csv.trim().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(parsed, attention_heatmap(&a).unwrap().raw);
    }
}
