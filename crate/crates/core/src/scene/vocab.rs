//! Per-scene object inventories loaded from `vocab/<scene>.toml`.

use std::path::Path;

use serde::Deserialize;

use super::SceneError;
use crate::episode::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capability {
    Pickupable,
    Receptacle,
    Sliceable,
    Washable,
    Toggleable,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub flags: Vec<Capability>,
}

impl ObjectSpec {
    pub fn has(&self, cap: Capability) -> bool {
        self.flags.contains(&cap)
    }

    /// Receptacles and fixed appliances are places an agent can stand at.
    pub fn is_place(&self) -> bool {
        !self.has(Capability::Pickupable)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneVocabulary {
    pub scene: Scene,
    pub templates: Vec<String>,
    pub objects: Vec<ObjectSpec>,
    /// The file text this vocabulary was read from, kept for output snapshots.
    pub source: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    scene: String,
    templates: Vec<String>,
    objects: Vec<ObjectSpec>,
}

impl SceneVocabulary {
    pub fn from_toml(text: &str) -> Result<Self, SceneError> {
        let file: VocabFile =
            toml::from_str(text).map_err(|e| SceneError::BadVocabFile(e.to_string()))?;
        let scene = Scene::parse(&file.scene).map_err(|e| SceneError::BadVocabFile(e.to_string()))?;
        let vocab = SceneVocabulary {
            scene,
            templates: file.templates,
            objects: file.objects,
            source: text.to_string(),
        };
        vocab.check()?;
        Ok(vocab)
    }

    fn check(&self) -> Result<(), SceneError> {
        let mut names = std::collections::HashSet::new();
        for obj in &self.objects {
            if !crate::episode::is_valid_token(&obj.name) {
                return Err(SceneError::BadVocabFile(format!("invalid object name `{}`", obj.name)));
            }
            if !names.insert(obj.name.as_str()) {
                return Err(SceneError::BadVocabFile(format!(
                    "{}: duplicate object `{}`",
                    self.scene, obj.name
                )));
            }
            if obj.has(Capability::Pickupable) && obj.has(Capability::Receptacle) {
                return Err(SceneError::BadVocabFile(format!(
                    "{}: `{}` cannot be both pickupable and a receptacle",
                    self.scene, obj.name
                )));
            }
        }
        Ok(())
    }

    pub fn object(&self, name: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn with(&self, cap: Capability) -> impl Iterator<Item = &ObjectSpec> {
        self.objects.iter().filter(move |o| o.has(cap))
    }
}

pub(crate) const DEFAULT_VOCAB_FILES: [(&str, &str); 4] = [
    ("kitchen.toml", include_str!("../../data/vocab/kitchen.toml")),
    ("bedroom.toml", include_str!("../../data/vocab/bedroom.toml")),
    ("livingroom.toml", include_str!("../../data/vocab/livingroom.toml")),
    ("bathroom.toml", include_str!("../../data/vocab/bathroom.toml")),
];

/// The shipped inventory, one vocabulary per scene in [`Scene::ALL`] order.
pub fn default_vocabularies() -> Vec<SceneVocabulary> {
    DEFAULT_VOCAB_FILES
        .iter()
        .map(|(_, text)| SceneVocabulary::from_toml(text).expect("shipped vocabulary is valid"))
        .collect()
}

/// Loads `<dir>/<scene>.toml` for every scene.
pub fn load_vocabularies(dir: &Path) -> Result<Vec<SceneVocabulary>, SceneError> {
    Scene::ALL
        .iter()
        .map(|scene| {
            let path = dir.join(format!("{scene}.toml"));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| SceneError::BadVocabFile(format!("{}: {e}", path.display())))?;
            let vocab = SceneVocabulary::from_toml(&text)?;
            if vocab.scene != *scene {
                return Err(SceneError::BadVocabFile(format!(
                    "{} declares scene `{}`",
                    path.display(),
                    vocab.scene
                )));
            }
            Ok(vocab)
        })
        .collect()
}

/// Writes each vocabulary's source text to `<dir>/<scene>.toml`.
pub fn write_vocabularies(vocabs: &[SceneVocabulary], dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for vocab in vocabs {
        std::fs::write(dir.join(format!("{}.toml", vocab.scene)), &vocab.source)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_inventory_has_118_objects() {
        let vocabs = default_vocabularies();
        assert_eq!(vocabs.len(), 4);
        let total: usize = vocabs.iter().map(|v| v.objects.len()).sum();
        assert_eq!(total, 118);
        for (vocab, scene) in vocabs.iter().zip(Scene::ALL) {
            assert_eq!(vocab.scene, scene);
        }
    }

    #[test]
    fn rejects_duplicate_objects() {
        let text = r#"
            scene = "kitchen"
            templates = ["find"]
            objects = [
              { name = "cup", flags = ["pickupable"] },
              { name = "cup", flags = ["pickupable"] },
            ]
        "#;
        assert!(SceneVocabulary::from_toml(text).is_err());
    }

    #[test]
    fn rejects_unknown_scene() {
        let text = r#"
            scene = "garage"
            templates = []
            objects = []
        "#;
        assert!(SceneVocabulary::from_toml(text).is_err());
    }
}
