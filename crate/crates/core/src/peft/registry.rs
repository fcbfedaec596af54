use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use super::manifest::MethodManifest;
use crate::error::{Error, Result};

/// Environment variable naming the plugin directory.
pub const PEFT_DIR_ENV: &str = "PEFT_DIR";
/// Plugin directory used when [`PEFT_DIR_ENV`] is unset.
pub const DEFAULT_PEFT_DIR: &str = "./peft";
/// Config descriptor file inside a method directory.
pub const MANIFEST_FILE: &str = "manifest";
/// Implementation descriptor file inside a method directory.
pub const IMPL_FILE: &str = "impl";

macro_rules! builtin {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!("../../builtin/", $name, "/manifest")),
            include_str!(concat!("../../builtin/", $name, "/impl")),
        )
    };
}

/// `(directory, manifest text, impl text)` for every built-in method.
pub const BUILTIN_SOURCES: &[(&str, &str, &str)] = &[
    builtin!("lora"),
    builtin!("prompt_tuning"),
    builtin!("prefix_tuning"),
    builtin!("p_tuning"),
    builtin!("ia3"),
    builtin!("bottleneck"),
    builtin!("parallel_adapter"),
    builtin!("bitfit"),
    builtin!("lntuning"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Builtin,
    Plugin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegisteredMethod {
    pub manifest: MethodManifest,
    pub origin: Origin,
    pub source: Option<PathBuf>,
}

/// Methods by peft_type. Built once, then read-only.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRegistry {
    methods: IndexMap<String, RegisteredMethod>,
}

impl MethodRegistry {
    pub fn builtin() -> Self {
        let mut reg = Self {
            methods: IndexMap::new(),
        };
        for (name, manifest, imp) in BUILTIN_SOURCES {
            let manifest = MethodManifest::parse(manifest, imp)
                .unwrap_or_else(|e| panic!("built-in method '{name}' is invalid: {e}"));
            reg.register(manifest, Origin::Builtin, None)
                .expect("built-in names are unique");
        }
        reg
    }

    fn register(&mut self, manifest: MethodManifest, origin: Origin, source: Option<PathBuf>) -> Result<()> {
        if let Some(existing) = self.methods.get(&manifest.peft_type) {
            let what = match existing.origin {
                Origin::Builtin => "a built-in method",
                Origin::Plugin => "an already discovered plugin",
            };
            return Err(Error::Registry(format!(
                "peft_type '{}' from {} collides with {what}",
                manifest.peft_type,
                source.as_deref().map_or_else(|| "<builtin>".into(), |p| p.display().to_string()),
            )));
        }
        self.methods.insert(
            manifest.peft_type.clone(),
            RegisteredMethod {
                manifest,
                origin,
                source,
            },
        );
        Ok(())
    }

    pub fn get(&self, peft_type: &str) -> Result<&MethodManifest> {
        self.methods.get(peft_type).map(|m| &m.manifest).ok_or_else(|| {
            Error::Registry(format!(
                "unknown peft_type '{peft_type}'; registered: [{}]",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn entry(&self, peft_type: &str) -> Option<&RegisteredMethod> {
        self.methods.get(peft_type)
    }

    pub fn contains(&self, peft_type: &str) -> bool {
        self.methods.contains_key(peft_type)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &RegisteredMethod> {
        self.methods.values()
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }
}

/// A method directory that was skipped, with the reason.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub dir: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Discovery {
    pub registry: MethodRegistry,
    /// peft_types added from the plugin directory, in scan order.
    pub registered: Vec<String>,
    pub skipped: Vec<Diagnostic>,
    /// Hard errors (duplicate peft_type), one per offending directory.
    pub errors: Vec<Diagnostic>,
}

impl Discovery {
    /// Fails with the first hard error, if any.
    pub fn check(self) -> Result<Self> {
        match self.errors.first() {
            Some(d) => Err(Error::Registry(d.reason.clone())),
            None => Ok(self),
        }
    }
}

/// Scans `dir` for method subdirectories and registers every valid one on
/// top of the built-ins. Fails if any subdirectory declares a peft_type that
/// is already registered.
///
/// A subdirectory is a candidate only if it holds both a `manifest` and an
/// `impl` file; candidates whose descriptors fail to parse or validate are
/// skipped with a diagnostic. Subdirectories are visited in name order.
pub fn discover_methods(dir: &Path) -> Result<Discovery> {
    scan_methods(dir)?.check()
}

/// Like [`discover_methods`], but visits every subdirectory and reports
/// duplicate peft_types in [`Discovery::errors`] instead of failing.
pub fn scan_methods(dir: &Path) -> Result<Discovery> {
    let mut registry = MethodRegistry::builtin();
    let mut registered = Vec::new();
    let mut skipped = Vec::new();
    let mut errors = Vec::new();

    let mut subdirs = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            subdirs.push(path);
        }
    }
    subdirs.sort();

    for sub in subdirs {
        let manifest_path = sub.join(MANIFEST_FILE);
        let impl_path = sub.join(IMPL_FILE);
        let missing: Vec<&str> = [(MANIFEST_FILE, &manifest_path), (IMPL_FILE, &impl_path)]
            .into_iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(n, _)| n)
            .collect();
        if !missing.is_empty() {
            let reason = format!("missing required component(s): {}", missing.join(", "));
            log::warn!("skipping {}: {reason}", sub.display());
            skipped.push(Diagnostic { dir: sub, reason });
            continue;
        }
        let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let impl_text = fs::read_to_string(&impl_path).map_err(|e| Error::io(&impl_path, e))?;
        match MethodManifest::parse(&manifest_text, &impl_text) {
            Ok(manifest) => {
                let name = manifest.peft_type.clone();
                match registry.register(manifest, Origin::Plugin, Some(sub.clone())) {
                    Ok(()) => {
                        log::info!("registered plugin method '{name}' from {}", sub.display());
                        registered.push(name);
                    }
                    Err(e) => {
                        log::error!("{e}");
                        let reason = match e {
                            Error::Registry(m) => m,
                            other => other.to_string(),
                        };
                        errors.push(Diagnostic { dir: sub, reason });
                    }
                }
            }
            Err(e) => {
                let reason = e.to_string();
                log::warn!("skipping {}: {reason}", sub.display());
                skipped.push(Diagnostic { dir: sub, reason });
            }
        }
    }
    Ok(Discovery {
        registry,
        registered,
        skipped,
        errors,
    })
}

/// Discovers from `$PEFT_DIR`, or from `./peft` when unset. A missing
/// default directory yields the built-ins only; a missing explicit one is an error.
pub fn discover_from_env() -> Result<Discovery> {
    match std::env::var_os(PEFT_DIR_ENV) {
        Some(dir) => discover_methods(Path::new(&dir)),
        None => {
            let dir = Path::new(DEFAULT_PEFT_DIR);
            if dir.is_dir() {
                discover_methods(dir)
            } else {
                Ok(Discovery {
                    registry: MethodRegistry::builtin(),
                    registered: Vec::new(),
                    skipped: Vec::new(),
                    errors: Vec::new(),
                })
            }
        }
    }
}
