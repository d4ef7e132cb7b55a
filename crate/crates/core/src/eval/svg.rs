use super::ConfusionMatrix;
use crate::role::{TrackRole, NUM_ROLES};

const CELL: usize = 56;
const LEFT: usize = 70;
const TOP: usize = 60;

/// Standalone SVG heatmap. Cell darkness grows with the value (row share
/// when `normalize_rows`, otherwise count over the largest count). Every
/// annotation carries its exact value in `data-value`.
pub fn render_confusion_svg(cm: &ConfusionMatrix, normalize_rows: bool) -> String {
    let values: [[f64; NUM_ROLES]; NUM_ROLES] = if normalize_rows {
        cm.row_normalized()
    } else {
        cm.counts.map(|r| r.map(|c| c as f64))
    };
    let max = values.iter().flatten().cloned().fold(0.0, f64::max);
    let size = LEFT + CELL * NUM_ROLES + 20;
    let height = TOP + CELL * NUM_ROLES + 50;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{height}\" \
         viewBox=\"0 0 {size} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let order: Vec<&str> = TrackRole::ALL.iter().map(|r| r.abbrev()).collect();
    s.push_str(&format!(
        "<title>Confusion matrix ({}); rows: true role, columns: predicted role; order: {}</title>\n",
        if normalize_rows { "row-normalized" } else { "counts" },
        order.join(", ")
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">predicted</text>\n",
        LEFT + CELL * NUM_ROLES / 2
    ));
    s.push_str(&format!(
        "<text x=\"14\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0})\">true</text>\n",
        TOP + CELL * NUM_ROLES / 2
    ));
    for (i, label) in order.iter().enumerate() {
        let c = LEFT + CELL * i + CELL / 2;
        s.push_str(&format!("<text x=\"{c}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\n", TOP - 8));
        let r = TOP + CELL * i + CELL / 2 + 4;
        s.push_str(&format!("<text x=\"{}\" y=\"{r}\" text-anchor=\"end\">{label}</text>\n", LEFT - 8));
    }
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let level = if max > 0.0 { v / max } else { 0.0 };
            let shade = (255.0 * (1.0 - level)).round() as u8;
            let (x, y) = (LEFT + CELL * j, TOP + CELL * i);
            s.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\" \
                 stroke=\"#888\" data-row=\"{i}\" data-col=\"{j}\"/>\n"
            ));
            let text = if normalize_rows { format!("{v:.3}") } else { format!("{}", cm.counts[i][j]) };
            let ink = if level > 0.5 { "#fff" } else { "#000" };
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{ink}\" data-row=\"{i}\" data-col=\"{j}\" \
                 data-value=\"{v}\">{text}</text>\n",
                x + CELL / 2,
                y + CELL / 2 + 4
            ));
        }
    }
    s.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"{}\">order: {}</text>\n",
        TOP + CELL * NUM_ROLES + 30,
        order.join(", ")
    ));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cells(svg: &str, attr: &str) -> Vec<(usize, usize, String)> {
        let doc = roxmltree::Document::parse(svg).unwrap();
        doc.descendants()
            .filter(|n| n.attribute(attr).is_some() && n.attribute("data-row").is_some())
            .map(|n| {
                (
                    n.attribute("data-row").unwrap().parse().unwrap(),
                    n.attribute("data-col").unwrap().parse().unwrap(),
                    n.attribute(attr).unwrap().to_string(),
                )
            })
            .collect()
    }

    fn sample() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for i in 0..NUM_ROLES {
            cm.counts[i][i] = 20 + i as u64;
            cm.counts[i][(i + 1) % NUM_ROLES] = 3;
        }
        cm.counts[4][0] = 1;
        cm
    }

    #[test]
    fn diagonal_is_darkest() {
        let svg = render_confusion_svg(&sample(), true);
        let shade = |fill: &str| fill[4..].split(',').next().unwrap().parse::<u8>().unwrap();
        let fills = cells(&svg, "fill");
        for i in 0..NUM_ROLES {
            let diag = fills.iter().find(|c| c.0 == i && c.1 == i && c.2.starts_with("rgb")).unwrap();
            for off in fills.iter().filter(|c| c.0 == i && c.1 != i && c.2.starts_with("rgb")) {
                assert!(shade(&diag.2) < shade(&off.2));
            }
        }
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let svg = render_confusion_svg(&sample(), true);
        let vals = cells(&svg, "data-value");
        assert_eq!(vals.len(), 36);
        for i in 0..NUM_ROLES {
            let sum: f64 = vals.iter().filter(|c| c.0 == i).map(|c| c.2.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn labels_and_counts() {
        let svg = render_confusion_svg(&sample(), false);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
        for label in ["Ac", "Bs", "MM", "Pad", "Riff", "SM"] {
            assert!(texts.contains(&label));
        }
        assert!(texts.contains(&"25"));
    }
}
