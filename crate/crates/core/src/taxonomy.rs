//! Two-level label taxonomy: coarse groups and their fine species.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupId(pub u16);

/// Fine label index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpeciesId(pub u16);

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for SpeciesId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub id: GroupId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub id: SpeciesId,
    pub name: String,
    pub group: GroupId,
}

/// Groups and species with dense ids; every species has exactly one parent.
///
/// Stored on disk as a TOML sidecar (`taxonomy.toml`) next to feature files
/// so that several datasets can share it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    #[serde(rename = "group")]
    groups: Vec<Group>,
    #[serde(rename = "species")]
    species: Vec<Species>,
}

/// File name of the taxonomy sidecar looked up next to feature files.
pub const TAXONOMY_FILE: &str = "taxonomy.toml";

impl Taxonomy {
    /// Builds a taxonomy from group names and, per group, its species names.
    /// Ids are assigned densely in the given order.
    pub fn from_names<G, S>(groups: &[(G, Vec<S>)]) -> Result<Self>
    where
        G: AsRef<str>,
        S: AsRef<str>,
    {
        let mut gs = Vec::with_capacity(groups.len());
        let mut ss = Vec::new();
        for (gi, (gname, species)) in groups.iter().enumerate() {
            let gid = GroupId(to_u16(gi, "group")?);
            gs.push(Group {
                id: gid,
                name: gname.as_ref().to_owned(),
            });
            for sname in species {
                ss.push(Species {
                    id: SpeciesId(to_u16(ss.len(), "species")?),
                    name: sname.as_ref().to_owned(),
                    group: gid,
                });
            }
        }
        Self::new(gs, ss)
    }

    pub fn new(groups: Vec<Group>, species: Vec<Species>) -> Result<Self> {
        let t = Taxonomy { groups, species };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Taxonomy("no groups".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.id.0 as usize != i {
                return Err(Error::Taxonomy(format!(
                    "group ids must be dense and ordered: position {i} has id {}",
                    g.id
                )));
            }
        }
        for (i, s) in self.species.iter().enumerate() {
            if s.id.0 as usize != i {
                return Err(Error::Taxonomy(format!(
                    "species ids must be dense and ordered: position {i} has id {}",
                    s.id
                )));
            }
            if s.group.0 as usize >= self.groups.len() {
                return Err(Error::Taxonomy(format!(
                    "species {} ({}) names unknown parent group {}",
                    s.id, s.name, s.group
                )));
            }
        }
        Ok(())
    }

    /// Six groups and 31 species with the group sizes of the longline
    /// fisheries dataset (Sharks=4, Skates=2, Flatfish=2).
    pub fn paper_shape() -> Self {
        let sizes: [(&str, usize); 6] = [
            ("Sharks", 4),
            ("Skates", 2),
            ("Flatfish", 2),
            ("Roundfish", 8),
            ("Rockfish", 9),
            ("Other", 6),
        ];
        let groups: Vec<(String, Vec<String>)> = sizes
            .iter()
            .map(|&(name, n)| {
                let species = (0..n).map(|k| format!("{name}-{}", k + 1)).collect();
                (name.to_owned(), species)
            })
            .collect();
        Self::from_names(&groups).expect("static taxonomy is valid")
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_species(&self) -> usize {
        self.species.len()
    }

    pub fn parent(&self, species: SpeciesId) -> Option<GroupId> {
        self.species.get(species.0 as usize).map(|s| s.group)
    }

    pub fn has_group(&self, group: GroupId) -> bool {
        (group.0 as usize) < self.groups.len()
    }

    /// Species of `group`, in id order.
    pub fn children(&self, group: GroupId) -> Vec<SpeciesId> {
        self.species
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.id)
            .collect()
    }

    pub fn group_name(&self, group: GroupId) -> &str {
        self.groups
            .get(group.0 as usize)
            .map(|g| g.name.as_str())
            .unwrap_or("?")
    }

    pub fn species_name(&self, species: SpeciesId) -> &str {
        self.species
            .get(species.0 as usize)
            .map(|s| s.name.as_str())
            .unwrap_or("?")
    }

    /// Checks that `species` exists and hangs under `group`.
    pub fn check_pair(&self, group: GroupId, species: SpeciesId) -> Result<()> {
        match self.parent(species) {
            None => Err(Error::Taxonomy(format!("unknown species {species}"))),
            Some(g) if g != group => Err(Error::Taxonomy(format!(
                "species {species} belongs to group {g}, record says {group}"
            ))),
            Some(_) => Ok(()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Taxonomy = toml::from_str(text).map_err(|e| Error::Taxonomy(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

fn to_u16(i: usize, what: &str) -> Result<u16> {
    u16::try_from(i).map_err(|_| Error::Taxonomy(format!("too many {what} entries")))
}
