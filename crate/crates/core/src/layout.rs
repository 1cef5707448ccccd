//! Room layout documents: strict parsing, validation and rendering.
//!
//! A layout document has the keys `title`, an optional `html` element list
//! and a `scripts` map binding client slots to plugins. Elements use the keys
//! `layout-type`, `layout-content`, `id`, `style`, `src` and `autoplay`.
//! Unknown keys are rejected, and every error names the offending path
//! (`html[1].id`, `scripts.incoming-video`, ...).
//!
//! Rendering produces a [`RenderedLayout`]: the element tree with ids,
//! kinds, attributes and plugin bindings after folding the display
//! mutations that apply to one user.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const MAX_DEPTH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    #[serde(rename = "incoming-text")]
    IncomingText,
    #[serde(rename = "incoming-image")]
    IncomingImage,
    #[serde(rename = "submit-message")]
    SubmitMessage,
    #[serde(rename = "print-history")]
    PrintHistory,
    #[serde(rename = "typing-users")]
    TypingUsers,
    /// Plugins loaded without an event binding.
    #[serde(rename = "plain")]
    Plain,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::IncomingText,
        Slot::IncomingImage,
        Slot::SubmitMessage,
        Slot::PrintHistory,
        Slot::TypingUsers,
        Slot::Plain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Slot::IncomingText => "incoming-text",
            Slot::IncomingImage => "incoming-image",
            Slot::SubmitMessage => "submit-message",
            Slot::PrintHistory => "print-history",
            Slot::TypingUsers => "typing-users",
            Slot::Plain => "plain",
        }
    }

    fn parse(s: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|slot| slot.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Plugin {
    DisplayText,
    DisplayImage,
    SendMessage,
    PlainHistory,
    Markdown,
    MarkdownHistory,
    TypingUsers,
    LiveTyping,
    BoundingBoxes,
    MouseTracking,
}

impl Plugin {
    pub const ALL: [Plugin; 10] = [
        Plugin::DisplayText,
        Plugin::DisplayImage,
        Plugin::SendMessage,
        Plugin::PlainHistory,
        Plugin::Markdown,
        Plugin::MarkdownHistory,
        Plugin::TypingUsers,
        Plugin::LiveTyping,
        Plugin::BoundingBoxes,
        Plugin::MouseTracking,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Plugin::DisplayText => "display-text",
            Plugin::DisplayImage => "display-image",
            Plugin::SendMessage => "send-message",
            Plugin::PlainHistory => "plain-history",
            Plugin::Markdown => "markdown",
            Plugin::MarkdownHistory => "markdown-history",
            Plugin::TypingUsers => "typing-users",
            Plugin::LiveTyping => "live-typing",
            Plugin::BoundingBoxes => "bounding-boxes",
            Plugin::MouseTracking => "mouse-tracking",
        }
    }

    fn parse(s: &str) -> Option<Plugin> {
        Plugin::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

/// A slot binds one plugin; `plain` may also list several.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Binding {
    One(Plugin),
    Many(Vec<Plugin>),
}

impl Binding {
    pub fn plugins(&self) -> Vec<Plugin> {
        match self {
            Binding::One(p) => vec![*p],
            Binding::Many(ps) => ps.clone(),
        }
    }
}

const SAFE_KINDS: &[&str] = &[
    "div",
    "span",
    "p",
    "h1",
    "h2",
    "h3",
    "button",
    "image",
    "audio",
    "audio controls",
    "video",
    "video controls",
];

const MEDIA_KINDS: &[&str] = &["image", "audio", "audio controls", "video", "video controls"];

const SAFE_ATTRIBUTES: &[&str] = &["title", "alt", "width", "height", "style", "disabled", "placeholder", "value"];

fn is_media(kind: &str) -> bool {
    MEDIA_KINDS.contains(&kind)
}

fn is_playable(kind: &str) -> bool {
    kind.starts_with("audio") || kind.starts_with("video")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementSpec {
    #[serde(rename = "layout-type")]
    pub layout_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoplay: Option<bool>,
    #[serde(rename = "layout-content", default, skip_serializing_if = "Option::is_none")]
    pub layout_content: Option<Vec<ElementSpec>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub html: Option<Vec<ElementSpec>>,
    pub scripts: BTreeMap<Slot, Binding>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Lift the element-kind and attribute whitelists.
    pub unsafe_html: bool,
}

impl LayoutDocument {
    pub fn parse_str(text: &str, opts: ParseOptions) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::validation("$", format!("malformed document: {e}")))?;
        Self::parse_value(&value, opts)
    }

    pub fn parse_value(value: &Value, opts: ParseOptions) -> Result<Self> {
        let obj = expect_object(value, "$")?;
        reject_unknown(obj, "", &["title", "html", "scripts"])?;

        let title = match obj.get("title") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::validation("title", "expected a string")),
            None => return Err(Error::validation("title", "missing required key")),
        };

        let mut seen_ids = HashSet::new();
        let html = match obj.get("html") {
            None => None,
            Some(v) => Some(parse_elements(v, "html", 1, opts, &mut seen_ids)?),
        };

        let scripts_value = obj.get("scripts").ok_or_else(|| Error::validation("scripts", "missing required key"))?;
        let scripts_obj = expect_object(scripts_value, "scripts")?;
        let mut scripts = BTreeMap::new();
        for (name, binding) in scripts_obj {
            let path = format!("scripts.{name}");
            let slot = Slot::parse(name).ok_or_else(|| Error::validation(&path, format!("unknown script slot `{name}`")))?;
            let parsed = match binding {
                Value::String(p) => Binding::One(parse_plugin(p, &path)?),
                Value::Array(items) if slot == Slot::Plain => {
                    let mut plugins = Vec::with_capacity(items.len());
                    for (i, item) in items.iter().enumerate() {
                        let item_path = format!("{path}[{i}]");
                        match item {
                            Value::String(p) => plugins.push(parse_plugin(p, &item_path)?),
                            _ => return Err(Error::validation(item_path, "expected a plugin name")),
                        }
                    }
                    Binding::Many(plugins)
                }
                _ => return Err(Error::validation(path, "expected a plugin name")),
            };
            scripts.insert(slot, parsed);
        }

        Ok(LayoutDocument { title, html, scripts })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serializes")
    }

    /// Chat-only layout used by rooms without one: history and input, no display area.
    pub fn default_chat() -> Self {
        let scripts = [
            (Slot::IncomingText, Plugin::DisplayText),
            (Slot::IncomingImage, Plugin::DisplayImage),
            (Slot::SubmitMessage, Plugin::SendMessage),
            (Slot::PrintHistory, Plugin::PlainHistory),
            (Slot::TypingUsers, Plugin::TypingUsers),
        ]
        .into_iter()
        .map(|(s, p)| (s, Binding::One(p)))
        .collect();
        LayoutDocument { title: "Room".into(), html: None, scripts }
    }

    pub fn plugins(&self) -> BTreeSet<Plugin> {
        self.scripts.values().flat_map(Binding::plugins).collect()
    }

    /// Looks up an element by id anywhere in the tree.
    pub fn element(&self, id: &str) -> Option<&ElementSpec> {
        fn find<'a>(elements: &'a [ElementSpec], id: &str) -> Option<&'a ElementSpec> {
            for el in elements {
                if el.id.as_deref() == Some(id) {
                    return Some(el);
                }
                if let Some(found) = el.layout_content.as_deref().and_then(|c| find(c, id)) {
                    return Some(found);
                }
            }
            None
        }
        self.html.as_deref().and_then(|els| find(els, id))
    }

    /// Checks that `mutation` is applicable to the element named `element_id`.
    pub fn check_mutation(&self, element_id: &str, mutation: &Mutation, opts: ParseOptions) -> Result<()> {
        let el = self
            .element(element_id)
            .ok_or_else(|| Error::validation("payload.element", format!("unknown element `{element_id}`")))?;
        let kind = el.layout_type.as_str();
        let invalid = |what: &str| Err(Error::validation("payload.mutation", format!("{what} is not valid for `{kind}` element `{element_id}`")));
        match mutation {
            Mutation::SetText(_) if is_media(kind) && !opts.unsafe_html => invalid("set_text"),
            Mutation::SetImageSrc(_) if !is_media(kind) && !opts.unsafe_html => invalid("set_image_src"),
            Mutation::SetAttribute { name, .. } => {
                let allowed = opts.unsafe_html || SAFE_ATTRIBUTES.contains(&name.as_str()) || name.starts_with("data-");
                if allowed && !name.is_empty() && !name.to_ascii_lowercase().starts_with("on") {
                    Ok(())
                } else {
                    invalid(&format!("attribute `{name}`"))
                }
            }
            _ => Ok(()),
        }
    }
}

fn expect_object<'a>(value: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    value.as_object().ok_or_else(|| Error::validation(path, "expected an object"))
}

fn reject_unknown(obj: &Map<String, Value>, prefix: &str, allowed: &[&str]) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
            return Err(Error::validation(path, format!("unknown key `{key}`")));
        }
    }
    Ok(())
}

fn parse_plugin(name: &str, path: &str) -> Result<Plugin> {
    Plugin::parse(name).ok_or_else(|| Error::validation(path, format!("unknown plugin `{name}`")))
}

fn optional_string(obj: &Map<String, Value>, key: &str, path: &str) -> Result<Option<String>> {
    match obj.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::validation(format!("{path}.{key}"), "expected a string")),
    }
}

fn parse_elements(value: &Value, path: &str, depth: usize, opts: ParseOptions, seen: &mut HashSet<String>) -> Result<Vec<ElementSpec>> {
    if depth > MAX_DEPTH {
        return Err(Error::validation(path, format!("nesting deeper than {MAX_DEPTH} levels")));
    }
    let items = value.as_array().ok_or_else(|| Error::validation(path, "expected a list of elements"))?;
    let mut out = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let el_path = format!("{path}[{i}]");
        out.push(parse_element(item, &el_path, depth, opts, seen)?);
    }
    Ok(out)
}

fn parse_element(value: &Value, path: &str, depth: usize, opts: ParseOptions, seen: &mut HashSet<String>) -> Result<ElementSpec> {
    let obj = expect_object(value, path)?;
    reject_unknown(obj, path, &["layout-type", "layout-content", "id", "style", "src", "autoplay"])?;

    let layout_type = optional_string(obj, "layout-type", path)?
        .ok_or_else(|| Error::validation(format!("{path}.layout-type"), "missing required key"))?;
    if !opts.unsafe_html && !SAFE_KINDS.contains(&layout_type.as_str()) {
        return Err(Error::validation(format!("{path}.layout-type"), format!("element kind `{layout_type}` is not allowed")));
    }

    let id = optional_string(obj, "id", path)?;
    if let Some(id) = &id {
        if id.is_empty() {
            return Err(Error::validation(format!("{path}.id"), "empty id"));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::validation(format!("{path}.id"), format!("duplicate id `{id}`")));
        }
    }

    let style = optional_string(obj, "style", path)?;
    let src = optional_string(obj, "src", path)?;
    if src.is_some() && !is_media(&layout_type) && !opts.unsafe_html {
        return Err(Error::validation(format!("{path}.src"), format!("`{layout_type}` elements take no src")));
    }

    let autoplay = match obj.get("autoplay") {
        None => None,
        Some(Value::Bool(b)) => Some(*b),
        Some(Value::String(s)) if s == "true" => Some(true),
        Some(Value::String(s)) if s == "false" => Some(false),
        Some(_) => return Err(Error::validation(format!("{path}.autoplay"), "expected true or false")),
    };
    if autoplay.is_some() && !is_playable(&layout_type) && !opts.unsafe_html {
        return Err(Error::validation(format!("{path}.autoplay"), format!("`{layout_type}` elements cannot autoplay")));
    }

    let layout_content = match obj.get("layout-content") {
        None => None,
        Some(v) => {
            let child_path = format!("{path}.layout-content");
            if is_media(&layout_type) && !opts.unsafe_html {
                return Err(Error::validation(child_path, format!("`{layout_type}` elements cannot have children")));
            }
            Some(parse_elements(v, &child_path, depth + 1, opts, seen)?)
        }
    };

    Ok(ElementSpec { layout_type, id, style, src, autoplay, layout_content })
}

/// A single change to one element, as carried by `display_update` events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mutation", content = "value", rename_all = "snake_case")]
pub enum Mutation {
    SetText(String),
    SetImageSrc(String),
    SetAttribute { name: String, value: String },
    SetClass(String),
    SetVisible(bool),
}

impl Mutation {
    /// The (element, field) slot this mutation writes. Mutations on distinct
    /// slots commute.
    pub fn field(&self) -> Field {
        match self {
            Mutation::SetText(_) => Field::Text,
            Mutation::SetImageSrc(_) => Field::Src,
            Mutation::SetAttribute { name, .. } => Field::Attribute(name.clone()),
            Mutation::SetClass(_) => Field::Class,
            Mutation::SetVisible(_) => Field::Visible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Field {
    Text,
    Src,
    Class,
    Visible,
    Attribute(String),
}

/// An element mutation addressed by element id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementOverride {
    pub element: String,
    #[serde(flatten)]
    pub mutation: Mutation,
}

/// Last-writer-wins fold of element overrides, keyed by (element, field).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DisplayState {
    slots: BTreeMap<(String, Field), Mutation>,
}

impl DisplayState {
    pub fn apply(&mut self, ov: &ElementOverride) {
        self.slots.insert((ov.element.clone(), ov.mutation.field()), ov.mutation.clone());
    }

    pub fn merged(&self, later: &DisplayState) -> DisplayState {
        let mut out = self.clone();
        out.slots.extend(later.slots.iter().map(|(k, v)| (k.clone(), v.clone())));
        out
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn overrides(&self) -> impl Iterator<Item = ElementOverride> + '_ {
        self.slots.iter().map(|((el, _), m)| ElementOverride { element: el.clone(), mutation: m.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedElement {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoplay: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub visible: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RenderedElement>,
}

impl RenderedElement {
    fn from_spec(spec: &ElementSpec) -> Self {
        RenderedElement {
            kind: spec.layout_type.clone(),
            id: spec.id.clone(),
            style: spec.style.clone(),
            // Media elements always carry a src so bots can fill it in later.
            src: spec.src.clone().or_else(|| is_media(&spec.layout_type).then(String::new)),
            autoplay: spec.autoplay,
            text: None,
            class: None,
            visible: true,
            attributes: BTreeMap::new(),
            children: spec.layout_content.iter().flatten().map(RenderedElement::from_spec).collect(),
        }
    }

    fn find_mut(&mut self, id: &str) -> Option<&mut RenderedElement> {
        if self.id.as_deref() == Some(id) {
            return Some(self);
        }
        self.children.iter_mut().find_map(|c| c.find_mut(id))
    }

    pub fn find(&self, id: &str) -> Option<&RenderedElement> {
        if self.id.as_deref() == Some(id) {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(id))
    }
}

/// What a client receives to build its view of a room.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedLayout {
    pub title: String,
    pub elements: Vec<RenderedElement>,
    pub plugins: BTreeMap<Slot, Binding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_session: Option<String>,
}

impl RenderedLayout {
    pub fn element(&self, id: &str) -> Option<&RenderedElement> {
        self.elements.iter().find_map(|e| e.find(id))
    }

    /// Applies one override in place. Unknown element ids are ignored.
    pub fn apply(&mut self, ov: &ElementOverride) {
        let Some(el) = self.elements.iter_mut().find_map(|e| e.find_mut(&ov.element)) else {
            return;
        };
        match &ov.mutation {
            Mutation::SetText(t) => el.text = Some(t.clone()),
            Mutation::SetImageSrc(s) => el.src = Some(s.clone()),
            Mutation::SetAttribute { name, value } => {
                el.attributes.insert(name.clone(), value.clone());
            }
            Mutation::SetClass(c) => el.class = Some(c.clone()),
            Mutation::SetVisible(v) => el.visible = *v,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("rendered layout serializes")
    }

    /// Builds the display-area markup. Text and attribute values are escaped.
    pub fn to_html(&self) -> String {
        let mut out = String::new();
        for el in &self.elements {
            write_html(el, &mut out);
        }
        out
    }
}

/// Renders `layout` with a folded display state applied.
pub fn render(layout: &LayoutDocument, state: &DisplayState) -> RenderedLayout {
    let mut out = RenderedLayout {
        title: layout.title.clone(),
        elements: layout.html.iter().flatten().map(RenderedElement::from_spec).collect(),
        plugins: layout.scripts.clone(),
        video_session: None,
    };
    for ov in state.overrides() {
        out.apply(&ov);
    }
    out
}

struct Escaped<'a>(&'a str);

impl fmt::Display for Escaped<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0.chars() {
            match c {
                '&' => f.write_str("&amp;")?,
                '<' => f.write_str("&lt;")?,
                '>' => f.write_str("&gt;")?,
                '"' => f.write_str("&quot;")?,
                '\'' => f.write_str("&#39;")?,
                c => write!(f, "{c}")?,
            }
        }
        Ok(())
    }
}

fn write_html(el: &RenderedElement, out: &mut String) {
    use std::fmt::Write;
    let mut words = el.kind.split_whitespace();
    let tag = match words.next().unwrap_or("div") {
        "image" => "img",
        other => other,
    };
    let flags: Vec<&str> = words.collect();
    let _ = write!(out, "<{tag}");
    if let Some(id) = &el.id {
        let _ = write!(out, " id=\"{}\"", Escaped(id));
    }
    if let Some(class) = &el.class {
        let _ = write!(out, " class=\"{}\"", Escaped(class));
    }
    if let Some(style) = &el.style {
        let _ = write!(out, " style=\"{}\"", Escaped(style));
    }
    if let Some(src) = &el.src {
        let _ = write!(out, " src=\"{}\"", Escaped(src));
    }
    for flag in flags {
        let _ = write!(out, " {}", Escaped(flag));
    }
    if el.autoplay == Some(true) {
        out.push_str(" autoplay");
    }
    for (name, value) in &el.attributes {
        let _ = write!(out, " {}=\"{}\"", Escaped(name), Escaped(value));
    }
    if !el.visible {
        out.push_str(" hidden");
    }
    if tag == "img" {
        out.push('>');
        return;
    }
    out.push('>');
    if let Some(text) = &el.text {
        let _ = write!(out, "{}", Escaped(text));
    }
    for child in &el.children {
        write_html(child, out);
    }
    let _ = write!(out, "</{tag}>");
}
