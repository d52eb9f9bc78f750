//! Attribute → group registry.
//!
//! On-disk format (TOML):
//!
//! ```toml
//! # optional; fixes the attribute (label column / head) order.
//! # When omitted, attributes are numbered in the order the groups list them.
//! attributes = ["a", "b", "c"]
//!
//! [groups]            # group order is the table order
//! First = ["a", "c"]
//! Second = ["b"]
//! ```

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CelebA attribute-file header order.
pub const CELEBA_ATTRIBUTES: [&str; 40] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Bald",
    "Bangs",
    "Big_Lips",
    "Big_Nose",
    "Black_Hair",
    "Blond_Hair",
    "Blurry",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Goatee",
    "Gray_Hair",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Oval_Face",
    "Pale_Skin",
    "Pointy_Nose",
    "Receding_Hairline",
    "Rosy_Cheeks",
    "Sideburns",
    "Smiling",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Lipstick",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Young",
];

/// Seven facial-region groups over the 40 CelebA attributes.
pub const CELEBA_GROUPS: [(&str, &[&str]); 7] = [
    (
        "Mouth",
        &[
            "5_o_Clock_Shadow",
            "Big_Lips",
            "Mouth_Slightly_Open",
            "Mustache",
            "Wearing_Lipstick",
            "No_Beard",
        ],
    ),
    (
        "Lower Face",
        &["Double_Chin", "Goatee", "Wearing_Necklace", "Wearing_Necktie"],
    ),
    (
        "Cheeks",
        &["High_Cheekbones", "Rosy_Cheeks", "Sideburns", "Wearing_Earrings"],
    ),
    ("Nose", &["Big_Nose", "Pointy_Nose"]),
    (
        "Eyes",
        &[
            "Arched_Eyebrows",
            "Bags_Under_Eyes",
            "Bushy_Eyebrows",
            "Narrow_Eyes",
            "Eyeglasses",
        ],
    ),
    (
        "Hair",
        &[
            "Bald",
            "Bangs",
            "Black_Hair",
            "Blond_Hair",
            "Brown_Hair",
            "Gray_Hair",
            "Receding_Hairline",
            "Straight_Hair",
            "Wavy_Hair",
            "Wearing_Hat",
        ],
    ),
    (
        "Global",
        &[
            "Attractive",
            "Blurry",
            "Chubby",
            "Heavy_Makeup",
            "Male",
            "Oval_Face",
            "Pale_Skin",
            "Smiling",
            "Young",
        ],
    ),
];

/// Alternative spellings accepted by name lookup, mapped to CelebA names.
const ALIASES: [(&str, &str); 2] = [
    ("5_o'_clock_shadow", "5_o_Clock_Shadow"),
    ("eyeglass", "Eyeglasses"),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GroupingFile", into = "GroupingFile")]
pub struct AttributeGrouping {
    attributes: Vec<String>,
    groups: Vec<String>,
    assignment: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupingFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attributes: Option<Vec<String>>,
    groups: IndexMap<String, Vec<String>>,
}

impl TryFrom<GroupingFile> for AttributeGrouping {
    type Error = Error;

    fn try_from(file: GroupingFile) -> Result<Self> {
        let groups: Vec<(String, Vec<String>)> = file.groups.into_iter().collect();
        AttributeGrouping::from_groups(file.attributes, groups)
    }
}

impl From<AttributeGrouping> for GroupingFile {
    fn from(g: AttributeGrouping) -> Self {
        let groups = g
            .groups
            .iter()
            .enumerate()
            .map(|(gi, name)| {
                let members = g.members(gi).map(|i| g.attributes[i].clone()).collect();
                (name.clone(), members)
            })
            .collect();
        GroupingFile {
            attributes: Some(g.attributes),
            groups,
        }
    }
}

fn normalize(name: &str) -> String {
    let lowered = name.trim().replace(' ', "_").to_lowercase();
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == lowered)
        .map_or(lowered, |(_, canonical)| canonical.to_lowercase())
}

impl AttributeGrouping {
    /// Builds and validates a grouping from `(group, members)` pairs.
    ///
    /// `order` fixes attribute indices; without it attributes are numbered in
    /// the order the groups list them.
    pub fn from_groups(order: Option<Vec<String>>, groups: Vec<(String, Vec<String>)>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Validation("grouping has no groups".into()));
        }
        let mut owner: HashMap<&str, usize> = HashMap::new();
        let mut listed = Vec::new();
        for (gi, (gname, members)) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Validation(format!("group {gname} is empty")));
            }
            for m in members {
                if let Some(prev) = owner.insert(m.as_str(), gi) {
                    return Err(Error::Validation(format!(
                        "attribute {m} assigned to both {} and {gname}",
                        groups[prev].0
                    )));
                }
                listed.push(m.clone());
            }
        }
        let attributes = match order {
            None => listed,
            Some(order) => {
                let mut seen = HashMap::new();
                for a in &order {
                    if seen.insert(a.as_str(), ()).is_some() {
                        return Err(Error::Validation(format!("attribute {a} listed twice")));
                    }
                    if !owner.contains_key(a.as_str()) {
                        return Err(Error::Validation(format!("attribute {a} belongs to no group")));
                    }
                }
                if let Some(unknown) = listed.iter().find(|m| !seen.contains_key(m.as_str())) {
                    return Err(Error::Lookup(format!(
                        "group member {unknown} is not in the attribute list"
                    )));
                }
                order
            }
        };
        let assignment = attributes.iter().map(|a| owner[a.as_str()]).collect();
        Ok(Self {
            attributes,
            groups: groups.into_iter().map(|(n, _)| n).collect(),
            assignment,
        })
    }

    /// The 7-group / 40-attribute CelebA partition, attributes in header order.
    pub fn default_celeba() -> Self {
        let order = CELEBA_ATTRIBUTES.iter().map(|s| s.to_string()).collect();
        let groups = CELEBA_GROUPS
            .iter()
            .map(|(g, ms)| (g.to_string(), ms.iter().map(|m| m.to_string()).collect()))
            .collect();
        Self::from_groups(Some(order), groups).expect("built-in grouping is valid")
    }

    /// Parses the TOML grouping format.
    pub fn load(text: &str) -> Result<Self> {
        let file: GroupingFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        file.try_into()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&GroupingFile::from(self.clone())).expect("grouping serializes")
    }

    /// Number of attributes `K`.
    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Number of groups `G`.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_of(&self, attr: usize) -> Result<usize> {
        self.assignment.get(attr).copied().ok_or_else(|| {
            Error::Lookup(format!(
                "attribute index {attr} out of range for {} attributes",
                self.attributes.len()
            ))
        })
    }

    /// Attribute index by name; spaces and underscores are interchangeable,
    /// case is ignored and the alternative spellings "5 o' Clock Shadow" and
    /// "Eyeglass" are accepted.
    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        let key = normalize(name);
        self.attributes
            .iter()
            .position(|a| normalize(a) == key)
            .ok_or_else(|| Error::Lookup(format!("unknown attribute {name}")))
    }

    pub fn group_index(&self, name: &str) -> Result<usize> {
        let key = normalize(name);
        self.groups
            .iter()
            .position(|g| normalize(g) == key)
            .ok_or_else(|| Error::Lookup(format!("unknown group {name}")))
    }

    /// Group name of a named attribute.
    pub fn group_name_of(&self, attr_name: &str) -> Result<&str> {
        let g = self.group_of(self.attribute_index(attr_name)?)?;
        Ok(&self.groups[g])
    }

    /// Attribute indices assigned to group `g`, ascending.
    pub fn members(&self, g: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(move |(_, &owner)| owner == g)
            .map(|(i, _)| i)
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        (0..self.groups.len()).map(|g| self.members(g).count()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grouping_shape() {
        let g = AttributeGrouping::default_celeba();
        assert_eq!(g.num_attributes(), 40);
        assert_eq!(g.num_groups(), 7);
        assert_eq!(g.group_sizes(), vec![6, 4, 4, 2, 5, 10, 9]);
        assert_eq!(g.group_sizes().iter().sum::<usize>(), 40);
        assert_eq!(g.attributes()[0], "5_o_Clock_Shadow");
        assert_eq!(g.attributes()[39], "Young");
    }

    #[test]
    fn table_lookups() {
        let g = AttributeGrouping::default_celeba();
        assert_eq!(g.group_name_of("Big Nose").unwrap(), "Nose");
        assert_eq!(g.group_name_of("Wearing Lipstick").unwrap(), "Mouth");
        assert_eq!(g.group_name_of("Gray Hair").unwrap(), "Hair");
        assert_eq!(g.group_name_of("Smiling").unwrap(), "Global");
        assert_eq!(g.group_name_of("5 o' Clock Shadow").unwrap(), "Mouth");
        assert_eq!(g.group_name_of("Eyeglass").unwrap(), "Eyes");
        assert_eq!(g.group_name_of("Double Chin").unwrap(), "Lower Face");
        assert!(matches!(g.group_of(40), Err(Error::Lookup(_))));
        assert!(g.attribute_index("Tail").is_err());
    }

    #[test]
    fn minimal_config() {
        let g = AttributeGrouping::load("[groups]\nA = [\"x\", \"y\"]\nB = [\"z\"]\n").unwrap();
        assert_eq!(g.num_attributes(), 3);
        assert_eq!(g.num_groups(), 2);
        assert_eq!(g.group_of(2).unwrap(), 1);
    }

    #[test]
    fn rejects_invalid_configs() {
        let dup = AttributeGrouping::load("[groups]\nA = [\"x\"]\nB = [\"x\"]\n");
        assert!(matches!(dup, Err(Error::Validation(_))));
        let empty = AttributeGrouping::load("[groups]\nA = [\"x\"]\nB = []\n");
        assert!(matches!(empty, Err(Error::Validation(_))));
        let missing = AttributeGrouping::load("attributes = [\"x\"]\n[groups]\nA = [\"x\", \"y\"]\n");
        assert!(matches!(missing, Err(Error::Lookup(_))));
        let orphan = AttributeGrouping::load("attributes = [\"x\", \"q\"]\n[groups]\nA = [\"x\"]\n");
        assert!(matches!(orphan, Err(Error::Validation(_))));
        let unknown_key = AttributeGrouping::load("colour = 1\n[groups]\nA = [\"x\"]\n");
        assert!(unknown_key.is_err());
        assert!(AttributeGrouping::load("[groups]\n").is_err());
    }

    #[test]
    fn default_round_trips() {
        let g = AttributeGrouping::default_celeba();
        let text = g.to_toml();
        assert_eq!(AttributeGrouping::load(&text).unwrap(), g);
    }

    #[test]
    fn explicit_order_controls_indices() {
        let g = AttributeGrouping::load(
            "attributes = [\"z\", \"x\", \"y\"]\n[groups]\nA = [\"x\", \"y\"]\nB = [\"z\"]\n",
        )
        .unwrap();
        assert_eq!(g.group_of(0).unwrap(), 1);
        assert_eq!(g.members(0).collect::<Vec<_>>(), vec![1, 2]);
    }
}
