//! Model Library: versioned image descriptors, each bundling a set of models
//! with the data they need.

use crate::ids::{ImageId, ModelId};
use crate::textfmt::{parse_document, FieldError, Record};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const REGISTRY_HEADER: &str = "evop-model-library v1";

pub const DEFAULT_MAX_SESSIONS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelClass {
    Streamlined,
    Experimental,
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelClass::Streamlined => "streamlined",
            ModelClass::Experimental => "experimental",
        })
    }
}

impl FromStr for ModelClass {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "streamlined" => Ok(ModelClass::Streamlined),
            "experimental" => Ok(ModelClass::Experimental),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceProfile {
    pub cpu_cores: u32,
    pub mem_mb: u32,
    pub ephemeral_data_mb: u32,
}

impl Default for ResourceProfile {
    fn default() -> Self {
        Self {
            cpu_cores: 1,
            mem_mb: 1024,
            ephemeral_data_mb: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDescriptor {
    pub image_id: ImageId,
    pub model_ids: BTreeSet<ModelId>,
    pub version: u32,
    pub max_sessions: u32,
    pub resource_profile: ResourceProfile,
    pub model_class: ModelClass,
}

impl ImageDescriptor {
    pub fn new(image_id: &str, models: &[&str]) -> Self {
        Self {
            image_id: image_id.into(),
            model_ids: models.iter().map(|m| ModelId::from(*m)).collect(),
            version: 1,
            max_sessions: DEFAULT_MAX_SESSIONS,
            resource_profile: ResourceProfile::default(),
            model_class: ModelClass::Experimental,
        }
    }

    pub fn with_max_sessions(mut self, n: u32) -> Self {
        self.max_sessions = n;
        self
    }

    pub fn with_class(mut self, class: ModelClass) -> Self {
        self.model_class = class;
        self
    }

    pub fn problems(&self) -> Vec<String> {
        let id = &self.image_id;
        let mut errs = Vec::new();
        if id.as_str().is_empty() {
            errs.push("image id is empty".to_owned());
        }
        if self.model_ids.is_empty() {
            errs.push(format!("image {id} serves no models"));
        }
        if self.max_sessions == 0 {
            errs.push(format!("image {id} max_sessions must be positive"));
        }
        if self.version == 0 {
            errs.push(format!("image {id} version must be positive"));
        }
        if self.resource_profile.cpu_cores == 0 || self.resource_profile.mem_mb == 0 {
            errs.push(format!("image {id} needs positive cpu_cores and mem_mb"));
        }
        errs
    }

    pub fn from_record(rec: &Record) -> Result<Self, Vec<FieldError>> {
        let mut errs = rec.check_fields(&[
            "version",
            "models",
            "max_sessions",
            "cpu_cores",
            "mem_mb",
            "data_mb",
            "class",
        ]);
        let id = rec.positional(0, "an image id").map_err(|e| errs.push(e)).ok();
        let models = rec
            .required("models")
            .map(|m| {
                m.split(',')
                    .filter(|s| !s.is_empty())
                    .map(ModelId::from)
                    .collect::<BTreeSet<_>>()
            })
            .map_err(|e| errs.push(e))
            .ok();
        let mut num = |key: &str, default: u32| rec.parse_or(key, default).map_err(|e| errs.push(e)).ok();
        let version = num("version", 1);
        let max_sessions = num("max_sessions", DEFAULT_MAX_SESSIONS);
        let cpu_cores = num("cpu_cores", 1);
        let mem_mb = num("mem_mb", 1024);
        let data_mb = num("data_mb", 0);
        let class = rec
            .parse_or("class", ModelClass::Experimental)
            .map_err(|e| errs.push(e))
            .ok();
        if !errs.is_empty() {
            return Err(errs);
        }
        let desc = ImageDescriptor {
            image_id: ImageId::from(id.unwrap_or_default()),
            model_ids: models.unwrap_or_default(),
            version: version.unwrap_or(1),
            max_sessions: max_sessions.unwrap_or(DEFAULT_MAX_SESSIONS),
            resource_profile: ResourceProfile {
                cpu_cores: cpu_cores.unwrap_or(1),
                mem_mb: mem_mb.unwrap_or(1024),
                ephemeral_data_mb: data_mb.unwrap_or(0),
            },
            model_class: class.unwrap_or(ModelClass::Experimental),
        };
        let problems = desc.problems();
        if problems.is_empty() {
            Ok(desc)
        } else {
            Err(problems.into_iter().map(|p| rec.error(p)).collect())
        }
    }

    pub fn to_line(&self) -> String {
        let models: Vec<&str> = self.model_ids.iter().map(ModelId::as_str).collect();
        format!(
            "image {} version={} models={} max_sessions={} cpu_cores={} mem_mb={} data_mb={} class={}",
            self.image_id,
            self.version,
            models.join(","),
            self.max_sessions,
            self.resource_profile.cpu_cores,
            self.resource_profile.mem_mb,
            self.resource_profile.ephemeral_data_mb,
            self.model_class
        )
    }
}

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("model {model} is already served by image {existing}")]
    ModelConflict { model: ModelId, existing: ImageId },
    #[error("unknown model {0}")]
    UnknownModel(ModelId),
    #[error("invalid descriptor: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("registry file: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Parse(Vec<FieldError>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Registry of current image versions plus any older versions still pinned by
/// running instances.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelLibrary {
    current: BTreeMap<ImageId, ImageDescriptor>,
    retained: BTreeMap<(ImageId, u32), ImageDescriptor>,
    by_model: BTreeMap<ModelId, ImageId>,
}

impl ModelLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `descriptor` as the current version of its image. The supplied
    /// version is ignored: first registration gets 1, later ones previous + 1.
    pub fn register_image(&mut self, mut descriptor: ImageDescriptor) -> Result<(ImageId, u32), LibraryError> {
        descriptor.version = 1;
        let problems = descriptor.problems();
        if !problems.is_empty() {
            return Err(LibraryError::Invalid(problems));
        }
        for m in &descriptor.model_ids {
            if let Some(existing) = self.by_model.get(m) {
                if existing != &descriptor.image_id {
                    return Err(LibraryError::ModelConflict {
                        model: m.clone(),
                        existing: existing.clone(),
                    });
                }
            }
        }
        let id = descriptor.image_id.clone();
        if let Some(prev) = self.current.remove(&id) {
            descriptor.version = prev.version + 1;
            for m in &prev.model_ids {
                self.by_model.remove(m);
            }
            self.retained.insert((id.clone(), prev.version), prev);
        }
        for m in &descriptor.model_ids {
            self.by_model.insert(m.clone(), id.clone());
        }
        let version = descriptor.version;
        self.current.insert(id.clone(), descriptor);
        Ok((id, version))
    }

    pub fn resolve(&self, model: &ModelId) -> Result<&ImageDescriptor, LibraryError> {
        self.by_model
            .get(model)
            .and_then(|img| self.current.get(img))
            .ok_or_else(|| LibraryError::UnknownModel(model.clone()))
    }

    pub fn image(&self, id: &ImageId) -> Option<&ImageDescriptor> {
        self.current.get(id)
    }

    /// A specific version, current or retained.
    pub fn image_version(&self, id: &ImageId, version: u32) -> Option<&ImageDescriptor> {
        match self.current.get(id) {
            Some(d) if d.version == version => Some(d),
            _ => self.retained.get(&(id.clone(), version)),
        }
    }

    /// Current versions ordered by image id.
    pub fn list_images(&self) -> Vec<&ImageDescriptor> {
        self.current.values().collect()
    }

    /// Drops retained old versions for which `in_use` is false.
    pub fn prune_retained(&mut self, mut in_use: impl FnMut(&ImageId, u32) -> bool) {
        self.retained.retain(|(id, v), _| in_use(id, *v));
    }

    pub fn retained_versions(&self) -> impl Iterator<Item = (&ImageId, u32)> {
        self.retained.keys().map(|(id, v)| (id, *v))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(REGISTRY_HEADER);
        s.push('\n');
        for d in self.current.values() {
            s.push_str(&d.to_line());
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, LibraryError> {
        let records = parse_document(text, REGISTRY_HEADER).map_err(LibraryError::Parse)?;
        let mut lib = Self::new();
        let mut errs = Vec::new();
        for rec in &records {
            if rec.keyword != "image" {
                errs.push(rec.error(format!("unexpected `{}` record", rec.keyword)));
                continue;
            }
            match ImageDescriptor::from_record(rec) {
                Ok(d) => {
                    if lib.current.contains_key(&d.image_id) {
                        errs.push(rec.error(format!("duplicate image {}", d.image_id)));
                        continue;
                    }
                    if let Some(m) = d.model_ids.iter().find(|m| lib.by_model.contains_key(*m)) {
                        errs.push(rec.error(format!("model {m} served by two images")));
                        continue;
                    }
                    for m in &d.model_ids {
                        lib.by_model.insert(m.clone(), d.image_id.clone());
                    }
                    lib.current.insert(d.image_id.clone(), d);
                }
                Err(e) => errs.extend(e),
            }
        }
        if errs.is_empty() {
            Ok(lib)
        } else {
            Err(LibraryError::Parse(errs))
        }
    }

    /// Rewrites the registry file atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<(), LibraryError> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(self.to_text().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LibraryError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_registration_is_version_one() {
        let mut lib = ModelLibrary::new();
        let (id, v) = lib
            .register_image(ImageDescriptor::new("topo", &["topmodel-stub"]))
            .unwrap();
        assert_eq!((id.as_str(), v), ("topo", 1));
        assert_eq!(lib.resolve(&"topmodel-stub".into()).unwrap().image_id, id);
    }

    #[test]
    fn update_bumps_version_and_retains_old() {
        let mut lib = ModelLibrary::new();
        lib.register_image(ImageDescriptor::new("topo", &["topmodel-stub"]))
            .unwrap();
        let (_, v) = lib
            .register_image(ImageDescriptor::new("topo", &["topmodel-stub"]).with_max_sessions(8))
            .unwrap();
        assert_eq!(v, 2);
        let cur = lib.resolve(&"topmodel-stub".into()).unwrap();
        assert_eq!((cur.version, cur.max_sessions), (2, 8));
        assert_eq!(lib.image_version(&"topo".into(), 1).unwrap().max_sessions, 4);
        assert_eq!(lib.list_images().len(), 1);
        lib.prune_retained(|_, _| false);
        assert!(lib.image_version(&"topo".into(), 1).is_none());
    }

    #[test]
    fn model_conflict() {
        let mut lib = ModelLibrary::new();
        lib.register_image(ImageDescriptor::new("topo", &["topmodel-stub"]))
            .unwrap();
        let err = lib
            .register_image(ImageDescriptor::new("other", &["topmodel-stub"]))
            .unwrap_err();
        assert!(matches!(err, LibraryError::ModelConflict { .. }));
        // the failed registration changed nothing
        assert_eq!(lib.list_images().len(), 1);
    }

    #[test]
    fn update_may_drop_models() {
        let mut lib = ModelLibrary::new();
        lib.register_image(ImageDescriptor::new("topo", &["a", "b"])).unwrap();
        lib.register_image(ImageDescriptor::new("topo", &["a"])).unwrap();
        assert!(lib.resolve(&"b".into()).is_err());
        lib.register_image(ImageDescriptor::new("other", &["b"])).unwrap();
    }

    #[test]
    fn unknown_model() {
        assert!(matches!(
            ModelLibrary::new().resolve(&"nope".into()),
            Err(LibraryError::UnknownModel(_))
        ));
    }

    #[test]
    fn listing_is_sorted() {
        let mut lib = ModelLibrary::new();
        assert!(lib.list_images().is_empty());
        lib.register_image(ImageDescriptor::new("zeta", &["z"])).unwrap();
        lib.register_image(ImageDescriptor::new("alpha", &["a"])).unwrap();
        let ids: Vec<_> = lib.list_images().iter().map(|d| d.image_id.as_str()).collect();
        assert_eq!(ids, ["alpha", "zeta"]);
    }

    #[test]
    fn invalid_descriptor() {
        let mut lib = ModelLibrary::new();
        let bad = ImageDescriptor::new("x", &[]).with_max_sessions(0);
        match lib.register_image(bad) {
            Err(LibraryError::Invalid(p)) => assert_eq!(p.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("library.txt");
        let mut lib = ModelLibrary::new();
        lib.register_image(ImageDescriptor::new("topo", &["topmodel-stub", "t2"]))
            .unwrap();
        lib.register_image(ImageDescriptor::new("topo", &["topmodel-stub", "t2"]))
            .unwrap();
        lib.register_image(ImageDescriptor::new("flux", &["fluxmodel-stub"]).with_class(ModelClass::Streamlined))
            .unwrap();
        lib.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(REGISTRY_HEADER));
        let loaded = ModelLibrary::load(&path).unwrap();
        assert_eq!(loaded.list_images(), lib.list_images());
        assert_eq!(loaded.image(&"topo".into()).unwrap().version, 2);
    }

    #[test]
    fn registry_rejects_double_served_model() {
        let text = format!("{REGISTRY_HEADER}\nimage a models=m\nimage b models=m\n");
        assert!(ModelLibrary::from_text(&text).is_err());
    }
}
