//! CSV writers consumed by the plotting tool.

use std::fmt::Write as _;

use crate::data::Montage;
use crate::error::Result;
use crate::interpret::{ChannelScores, ClassMap, DeletionCurve};

/// `channel,score`, one row per electrode in storage order.
pub fn scores_csv(scores: &ChannelScores, montage: &Montage) -> Result<String> {
    montage.check_channels(scores.scores.len())?;
    let mut out = String::from("channel,score\n");
    for (name, s) in montage.names().iter().zip(&scores.scores) {
        writeln!(out, "{name},{s:.9e}").expect("string write");
    }
    Ok(out)
}

/// `channel,t0..t{T-1}`, one row per electrode.
pub fn map_csv(map: &ClassMap, montage: &Montage) -> Result<String> {
    montage.check_channels(map.channels)?;
    let mut out = String::from("channel");
    for t in 0..map.samples {
        write!(out, ",t{t}").expect("string write");
    }
    out.push('\n');
    for (c, name) in montage.names().iter().enumerate() {
        out.push_str(name);
        for v in &map.values[c * map.samples..(c + 1) * map.samples] {
            write!(out, ",{v:.9e}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

/// `fraction,mean_confidence,std,mode,class`; curves are appended in order.
/// The class column is empty for curves over all classes.
pub fn deletion_csv(curves: &[DeletionCurve]) -> String {
    let mut out = String::from("fraction,mean_confidence,std,mode,class\n");
    for c in curves {
        let class = c.class.map(|k| k.to_string()).unwrap_or_default();
        for i in 0..c.fractions.len() {
            writeln!(
                out,
                "{},{:.9},{:.9},{},{class}",
                c.fractions[i],
                c.mean_confidence[i],
                c.std[i],
                c.mode.as_str()
            )
            .expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpret::DeletionMode;

    #[test]
    fn map_has_one_row_per_channel() {
        let m = ClassMap {
            class: 0,
            channels: 2,
            samples: 3,
            values: vec![0.0; 6],
            n_trials: 1,
            scores: ChannelScores::from_scores(vec![0.0, 0.0]),
        };
        let csv = map_csv(&m, &Montage::numbered(2)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "channel,t0,t1,t2");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("ch1,"));
        assert!(map_csv(&m, &Montage::numbered(3)).is_err());
    }

    #[test]
    fn deletion_rows() {
        let c = DeletionCurve {
            fractions: vec![0.0, 0.2],
            deleted: vec![0, 7],
            mean_confidence: vec![0.9, 0.4],
            std: vec![0.1, 0.2],
            flipped: vec![0, 3],
            mode: DeletionMode::LeastImportant,
            class: Some(1),
            n_trials: 5,
        };
        let csv = deletion_csv(&[c]);
        assert_eq!(
            csv.lines().nth(2).unwrap(),
            "0.2,0.400000000,0.200000000,least-important,1"
        );
    }
}
