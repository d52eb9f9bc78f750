//! CelebA `list_attr_celeba.txt` format:
//!
//! ```text
//! 202599
//! 5_o_Clock_Shadow Arched_Eyebrows ...
//! 000001.jpg -1  1  1 ...
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grouping::AttributeGrouping;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CelebaAttributes {
    pub names: Vec<String>,
    /// `(image id, labels)` with `-1 → 0`, `1 → 1`.
    pub rows: Vec<(String, Vec<u8>)>,
}

impl CelebaAttributes {
    /// Label rows with columns reordered to `grouping`'s attribute order.
    pub fn labels_for(&self, grouping: &AttributeGrouping) -> Result<Vec<Vec<u8>>> {
        let columns = grouping
            .attributes()
            .iter()
            .map(|a| {
                self.names
                    .iter()
                    .position(|n| n == a)
                    .ok_or_else(|| Error::Lookup(format!("attribute {a} missing from file header")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .rows
            .iter()
            .map(|(_, labels)| columns.iter().map(|&c| labels[c]).collect())
            .collect())
    }
}

pub fn load_celeba_attributes(path: impl AsRef<Path>) -> Result<CelebaAttributes> {
    parse_celeba_attributes(&std::fs::read_to_string(path)?)
}

pub fn parse_celeba_attributes(text: &str) -> Result<CelebaAttributes> {
    let err = |line: usize, message: String| Error::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, count_line) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let count: usize = count_line
        .trim()
        .parse()
        .map_err(|_| err(1, format!("expected image count, found {count_line:?}")))?;
    let (_, header) = lines.next().ok_or_else(|| err(2, "missing attribute header".into()))?;
    let names: Vec<String> = header.split_whitespace().map(str::to_string).collect();
    if names.is_empty() {
        return Err(err(2, "attribute header is empty".into()));
    }

    let mut rows = Vec::with_capacity(count);
    let mut ids = HashSet::new();
    for (line_no, line) in lines {
        let mut fields = line.split_whitespace();
        let Some(id) = fields.next() else { continue };
        let labels = fields
            .map(|f| match f {
                "1" => Ok(1),
                "-1" => Ok(0),
                other => Err(err(line_no, format!("value {other:?} is not -1 or 1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        if labels.len() != names.len() {
            return Err(err(
                line_no,
                format!("{} values for {} attributes", labels.len(), names.len()),
            ));
        }
        if !ids.insert(id.to_string()) {
            return Err(err(line_no, format!("duplicate image id {id}")));
        }
        rows.push((id.to_string(), labels));
    }
    if rows.len() != count {
        return Err(err(
            1,
            format!("header declares {count} images but the file has {} rows", rows.len()),
        ));
    }
    Ok(CelebaAttributes { names, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "2\nSmiling Male Young\n000001.jpg -1  1  1\n000002.jpg  1 -1 -1\n";

    #[test]
    fn parses_toy_file() {
        let a = parse_celeba_attributes(TOY).unwrap();
        assert_eq!(a.names, vec!["Smiling", "Male", "Young"]);
        assert_eq!(a.rows.len(), 2);
        assert_eq!(a.rows[0], ("000001.jpg".to_string(), vec![0, 1, 1]));
        assert_eq!(a.rows[1].1, vec![1, 0, 0]);
    }

    #[test]
    fn count_mismatch() {
        let text = "5\nA B\nx 1 1\ny 1 1\nz 1 1\nw 1 1\n";
        let e = parse_celeba_attributes(text).unwrap_err();
        assert!(e.to_string().contains("5 images") && e.to_string().contains("4 rows"), "{e}");
    }

    #[test]
    fn bad_value_names_line() {
        let e = parse_celeba_attributes("1\nA B\nx 1 0\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        let e = parse_celeba_attributes("1\nA B\nx 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        let e = parse_celeba_attributes("2\nA\nx 1\nx -1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }));
        assert!(parse_celeba_attributes("two\nA\n").is_err());
    }

    #[test]
    fn aligns_to_grouping() {
        let a = parse_celeba_attributes(TOY).unwrap();
        let g = AttributeGrouping::load("[groups]\nG = [\"Young\", \"Smiling\"]\n").unwrap();
        assert_eq!(a.labels_for(&g).unwrap(), vec![vec![1, 0], vec![0, 1]]);
        let missing = AttributeGrouping::load("[groups]\nG = [\"Bald\"]\n").unwrap();
        assert!(a.labels_for(&missing).is_err());
    }
}
