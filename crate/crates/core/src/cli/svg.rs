//! Static SVG heatmap of an alignment posterior grid.

use ndarray::Array2;

use crate::error::{Error, Result};

const CELL: usize = 28;
const MARGIN: usize = 60;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Rows are input positions and columns output positions. Cells are shaded by
/// γ and the cells on `path` get an outline.
pub fn render(gamma: &Array2<f64>, input_labels: &[String], output_labels: &[String], path: &[usize]) -> Result<String> {
    let (rows, cols) = gamma.dim();
    if input_labels.len() != rows || output_labels.len() != cols || path.len() != cols {
        return Err(Error::contract("labels and path must match the grid"));
    }
    let width = MARGIN + cols * CELL + 10;
    let height = MARGIN + rows * CELL + 10;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    );
    s.push_str(&format!("<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"));
    for (j, label) in output_labels.iter().enumerate() {
        let x = MARGIN + j * CELL + CELL / 2;
        s.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            MARGIN - 8,
            escape(label)
        ));
    }
    for (i, label) in input_labels.iter().enumerate() {
        let y = MARGIN + i * CELL + CELL / 2 + 4;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" text-anchor=\"end\">{}</text>\n",
            MARGIN - 8,
            escape(label)
        ));
    }
    for i in 0..rows {
        for j in 0..cols {
            let g = gamma[[i, j]].clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - g)).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({shade},{shade},255)\" \
                 stroke=\"#ccc\"><title>{:.4}</title></rect>\n",
                MARGIN + j * CELL,
                MARGIN + i * CELL,
                gamma[[i, j]]
            ));
        }
    }
    for (j, &i) in path.iter().enumerate() {
        s.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"none\" stroke=\"#d00\" stroke-width=\"2\"/>\n",
            MARGIN + j * CELL,
            MARGIN + i * CELL
        ));
    }
    s.push_str("</svg>\n");
    Ok(s)
}
