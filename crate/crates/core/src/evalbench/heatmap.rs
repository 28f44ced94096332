use serde::{Deserialize, Serialize};

use crate::encoder::Group;
use crate::redundancy::{DropOrder, ImportanceReport};

/// Rows are sublayer groups, columns layers; each cell holds an importance
/// score and the rank at which that sublayer would be dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub rows: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub drop_rank: Vec<Vec<Option<usize>>>,
}

impl HeatMap {
    pub fn from_report(report: &ImportanceReport) -> Self {
        let order = DropOrder::from_report(report);
        let l = report.n_layers();
        let mut rows = Vec::new();
        let mut scores = Vec::new();
        let mut ranks = Vec::new();
        for g in [Group::Attn, Group::Mlp] {
            rows.push(g.name().to_string());
            scores.push(report.scores(g).to_vec());
            let mut r = vec![None; l];
            for (i, e) in order.group(g).iter().filter(|e| e.present).enumerate() {
                r[e.layer] = Some(i);
            }
            ranks.push(r);
        }
        Self { rows, scores, drop_rank: ranks }
    }

    /// `group,layer,score,drop_rank` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,layer,score,drop_rank\n");
        for (r, name) in self.rows.iter().enumerate() {
            for (l, v) in self.scores[r].iter().enumerate() {
                let rank = self.drop_rank[r][l].map_or(String::new(), |x| x.to_string());
                s.push_str(&format!("{name},{l},{v:.9},{rank}\n"));
            }
        }
        s
    }
}

/// Minimal SVG rendering: darker cells are more important, dropped
/// sublayers are hatched grey.
pub fn heatmap_svg(map: &HeatMap) -> String {
    const CELL: usize = 40;
    const LEFT: usize = 60;
    const TOP: usize = 24;
    let cols = map.scores.first().map_or(0, Vec::len);
    let max = map
        .scores
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let (w, h) = (LEFT + cols * CELL + 10, TOP + map.rows.len() * CELL + 10);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"monospace\" font-size=\"11\">\n"
    );
    for c in 0..cols {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"16\" text-anchor=\"middle\">{c}</text>\n",
            LEFT + c * CELL + CELL / 2
        ));
    }
    for (r, name) in map.rows.iter().enumerate() {
        let y = TOP + r * CELL;
        s.push_str(&format!("<text x=\"4\" y=\"{}\">{name}</text>\n", y + CELL / 2 + 4));
        for c in 0..cols {
            let x = LEFT + c * CELL;
            let fill = match map.drop_rank[r][c] {
                None => "#bbbbbb".to_string(),
                Some(_) => {
                    let v = (map.scores[r][c] / max).clamp(0.0, 1.0);
                    let g = (255.0 * (1.0 - v)).round() as u8;
                    format!("#{g:02x}{g:02x}ff")
                }
            };
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"#ffffff\"/>\n"
            ));
            if let Some(rank) = map.drop_rank[r][c] {
                s.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{rank}</text>\n",
                    x + CELL / 2,
                    y + CELL / 2 + 4
                ));
            }
        }
    }
    s.push_str("</svg>\n");
    s
}
