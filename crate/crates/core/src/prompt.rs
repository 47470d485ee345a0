//! Dialogue and image prompt rendering.
//!
//! Templates are data files (`place_prompt.tmpl`, `action_prompt.tmpl`,
//! `image_prefix.tmpl`); the bundled copies are compiled in and any directory
//! holding the same three files can replace them.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::ActionLabel;

pub const PLACE_TEMPLATE_FILE: &str = "place_prompt.tmpl";
pub const ACTION_TEMPLATE_FILE: &str = "action_prompt.tmpl";
pub const IMAGE_PREFIX_FILE: &str = "image_prefix.tmpl";

const BUNDLED_PLACE: &str = include_str!("../data/templates/place_prompt.tmpl");
const BUNDLED_ACTION: &str = include_str!("../data/templates/action_prompt.tmpl");
const BUNDLED_IMAGE_PREFIX: &str = include_str!("../data/templates/image_prefix.tmpl");

const LOCATION: &str = "{location}";
const REFLECTED_ACTION: &str = "{reflected_action}";
const AMBIGUOUS_REQUEST: &str = "{ambiguous_request}";
const BACKGROUND: &str = "{background}";

/// Subject word used for subject-conditioned image generation.
pub const SUBJECT_WORD: &str = "room";

const UNRESOLVED: &[&str] = &[
    "[location]",
    "[reflected_action]",
    LOCATION,
    REFLECTED_ACTION,
    AMBIGUOUS_REQUEST,
    BACKGROUND,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Place,
    Action,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Place => "place",
            Route::Action => "action",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phrasing of the ambiguity instruction in the place prompt.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// "an ambiguous request indirectly without asking a question"
    #[default]
    IndirectNoQuestion,
    /// "an ambiguous request without asking a question"
    NoQuestion,
    /// "an ambiguous request"
    Plain,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 3] = [
        PromptVariant::IndirectNoQuestion,
        PromptVariant::NoQuestion,
        PromptVariant::Plain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::IndirectNoQuestion => "indirect_no_question",
            PromptVariant::NoQuestion => "no_question",
            PromptVariant::Plain => "plain",
        }
    }

    pub fn ambiguity_phrase(self) -> &'static str {
        match self {
            PromptVariant::IndirectNoQuestion => {
                "an ambiguous request indirectly without asking a question"
            }
            PromptVariant::NoQuestion => "an ambiguous request without asking a question",
            PromptVariant::Plain => "an ambiguous request",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                format!("unknown prompt variant '{s}' (expected indirect_no_question, no_question or plain)")
            })
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("location must not be empty")]
    EmptyLocation,
    #[error("action text must not be empty")]
    EmptyAction,
    #[error("background description must not be empty")]
    EmptyBackground,
    #[error("action-route image prompts need a reference image")]
    MissingReferenceImage,
    #[error("rendered prompt still contains placeholder {0}")]
    Unresolved(String),
    #[error("template {path}: {message}")]
    Template { path: PathBuf, message: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A rendered dialogue-generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub route: Route,
    /// Only meaningful for the place route; action prompts carry the default.
    pub variant: PromptVariant,
    /// The location or action text substituted into the template.
    pub subject: String,
}

/// A rendered image-generation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePrompt {
    pub text: String,
    pub subject_conditioned: bool,
    pub reference_image: Option<PathBuf>,
    pub subject_word: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    place: String,
    action: String,
    image_prefix: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::bundled()
    }
}

fn clean_template(raw: &str) -> String {
    raw.lines()
        .map(str::trim_end)
        .collect::<Vec<_>>()
        .join("\n")
        .trim_end()
        .to_string()
}

fn require(template: &str, token: &str, path: &Path) -> Result<(), PromptError> {
    if template.matches(token).count() == 1 {
        Ok(())
    } else {
        Err(PromptError::Template {
            path: path.to_path_buf(),
            message: format!("must contain {token} exactly once"),
        })
    }
}

fn check_input(value: &str) -> Result<(), PromptError> {
    match UNRESOLVED.iter().find(|t| value.contains(*t)) {
        Some(t) => Err(PromptError::Unresolved((*t).to_string())),
        None => Ok(()),
    }
}

impl PromptTemplates {
    pub fn bundled() -> Self {
        Self::from_strings(BUNDLED_PLACE, BUNDLED_ACTION, BUNDLED_IMAGE_PREFIX)
            .expect("bundled templates are valid")
    }

    pub fn from_strings(place: &str, action: &str, image_prefix: &str) -> Result<Self, PromptError> {
        let place = clean_template(place);
        let action = clean_template(action);
        let image_prefix = clean_template(image_prefix);
        require(&place, LOCATION, Path::new(PLACE_TEMPLATE_FILE))?;
        require(&place, AMBIGUOUS_REQUEST, Path::new(PLACE_TEMPLATE_FILE))?;
        require(&action, REFLECTED_ACTION, Path::new(ACTION_TEMPLATE_FILE))?;
        require(&image_prefix, BACKGROUND, Path::new(IMAGE_PREFIX_FILE))?;
        Ok(Self {
            place,
            action,
            image_prefix,
        })
    }

    /// Loads the three template files from `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|source| PromptError::Io { path, source })
        };
        Self::from_strings(
            &read(PLACE_TEMPLATE_FILE)?,
            &read(ACTION_TEMPLATE_FILE)?,
            &read(IMAGE_PREFIX_FILE)?,
        )
        .map_err(|e| match e {
            PromptError::Template { path, message } => PromptError::Template {
                path: dir.join(path),
                message,
            },
            other => other,
        })
    }

    /// Writes the templates as files into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(PLACE_TEMPLATE_FILE), format!("{}\n", self.place))?;
        fs::write(dir.join(ACTION_TEMPLATE_FILE), format!("{}\n", self.action))?;
        fs::write(dir.join(IMAGE_PREFIX_FILE), format!("{}\n", self.image_prefix))
    }

    pub fn render_place_prompt(
        &self,
        location: &str,
        variant: PromptVariant,
    ) -> Result<PromptText, PromptError> {
        let location = location.trim();
        if location.is_empty() {
            return Err(PromptError::EmptyLocation);
        }
        check_input(location)?;
        let text = self
            .place
            .replace(AMBIGUOUS_REQUEST, variant.ambiguity_phrase())
            .replace(LOCATION, location);
        Ok(PromptText {
            text,
            route: Route::Place,
            variant,
            subject: location.to_string(),
        })
    }

    pub fn render_action_prompt(&self, action: &ActionLabel) -> Result<PromptText, PromptError> {
        let action_text = action.text.trim();
        if action_text.is_empty() {
            return Err(PromptError::EmptyAction);
        }
        check_input(action_text)?;
        Ok(PromptText {
            text: self.action.replace(REFLECTED_ACTION, action_text),
            route: Route::Action,
            variant: PromptVariant::default(),
            subject: action_text.to_string(),
        })
    }

    pub fn render_image_prompt(
        &self,
        background: &str,
        route: Route,
        reference_image: Option<&Path>,
    ) -> Result<ImagePrompt, PromptError> {
        let background = background.trim();
        if background.is_empty() {
            return Err(PromptError::EmptyBackground);
        }
        check_input(background)?;
        match route {
            Route::Place => Ok(ImagePrompt {
                text: self.image_prefix.replace(BACKGROUND, background),
                subject_conditioned: false,
                reference_image: reference_image.map(Path::to_path_buf),
                subject_word: None,
            }),
            Route::Action => {
                let reference = reference_image.ok_or(PromptError::MissingReferenceImage)?;
                Ok(ImagePrompt {
                    text: background.to_string(),
                    subject_conditioned: true,
                    reference_image: Some(reference.to_path_buf()),
                    subject_word: Some(SUBJECT_WORD.to_string()),
                })
            }
        }
    }
}

/// Renders a place prompt with the bundled template.
pub fn render_place_prompt(location: &str, variant: PromptVariant) -> Result<PromptText, PromptError> {
    PromptTemplates::bundled().render_place_prompt(location, variant)
}

/// Renders an action prompt with the bundled template.
pub fn render_action_prompt(action: &ActionLabel) -> Result<PromptText, PromptError> {
    PromptTemplates::bundled().render_action_prompt(action)
}

/// Renders an image prompt with the bundled prefix.
pub fn render_image_prompt(
    background: &str,
    route: Route,
    reference_image: Option<&Path>,
) -> Result<ImagePrompt, PromptError> {
    PromptTemplates::bundled().render_image_prompt(background, route, reference_image)
}
