use std::sync::mpsc;
use std::thread;

use maskedit::benchmark::CaptionEditor;
use maskedit::llm::{template_id, LlmClient, LlmError};
use maskedit_core::captions::{AttributeKind, AttributeSpec};
use tiny_http::{Header, Response, Server};

struct Seen {
    body: serde_json::Value,
    auth: Option<String>,
}

/// Serves one request with `status` and `body`, reporting what it received.
fn serve_once(status: u16, body: &'static str) -> (String, mpsc::Receiver<Seen>) {
    let server = Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/edit", server.server_addr().to_ip().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut req = server.recv().unwrap();
        let mut text = String::new();
        req.as_reader().read_to_string(&mut text).unwrap();
        let auth = req
            .headers()
            .iter()
            .find(|h| h.field.equiv("Authorization"))
            .map(|h| h.value.to_string());
        tx.send(Seen {
            body: serde_json::from_str(&text).unwrap(),
            auth,
        })
        .unwrap();
        let header = Header::from_bytes("Content-Type", "application/json").unwrap();
        req.respond(Response::from_string(body).with_status_code(status).with_header(header)).unwrap();
    });
    (url, rx)
}

#[test]
fn canned_reply_is_returned_and_request_carries_template_and_token() {
    let (url, seen) = serve_once(200, r#"{"caption": "a photo of a violet circle."}"#);
    let client = LlmClient::new(url, Some("secret".into()));
    let id = template_id(AttributeKind::Color);
    let out = client.edit(id, "a photo of a red circle.").unwrap();
    assert_eq!(out, "a photo of a violet circle.");
    let seen = seen.recv().unwrap();
    assert_eq!(seen.body["template_id"], id);
    assert_eq!(seen.body["caption"], "a photo of a red circle.");
    assert_eq!(seen.auth.as_deref(), Some("Bearer secret"));
}

#[test]
fn no_token_sends_no_authorization() {
    let (url, seen) = serve_once(200, r#"{"caption": "a sketch of a red circle."}"#);
    LlmClient::new(url, None).edit(template_id(AttributeKind::Style), "a photo of a red circle.").unwrap();
    assert_eq!(seen.recv().unwrap().auth, None);
}

#[test]
fn server_error_keeps_the_status() {
    let (url, _seen) = serve_once(500, "boom");
    let err = LlmClient::new(url, None).edit(template_id(AttributeKind::Color), "a photo of a dog.").unwrap_err();
    assert!(matches!(err, LlmError::Transport { status: Some(500), .. }), "{err:?}");
}

#[test]
fn malformed_reply_is_a_schema_error() {
    for body in [r#"{"text": "a photo of a dog."}"#, "not json", r#"{"caption": "  "}"#] {
        let (url, _seen) = serve_once(200, body);
        let err = LlmClient::new(url, None).edit(template_id(AttributeKind::Color), "a photo of a dog.").unwrap_err();
        assert!(matches!(err, LlmError::Schema(_)), "{body}: {err:?}");
    }
}

#[test]
fn unreachable_endpoint_has_no_status() {
    // bind then drop, so nothing listens on the port
    let port = Server::http("127.0.0.1:0").unwrap().server_addr().to_ip().unwrap().port();
    let err = LlmClient::new(format!("http://127.0.0.1:{port}/edit"), None)
        .edit(template_id(AttributeKind::Color), "a photo of a dog.")
        .unwrap_err();
    assert!(matches!(err, LlmError::Transport { status: None, .. }), "{err:?}");
}

#[test]
fn editor_rejects_replies_outside_the_grammar() {
    let (url, _seen) = serve_once(200, r#"{"caption": "violet circle!!"}"#);
    let editor = CaptionEditor::Llm(LlmClient::new(url, None));
    let spec = AttributeSpec::new(AttributeKind::Color, "violet", 1.0).unwrap();
    let err = editor.target_caption("a photo of a red circle.", &spec).unwrap_err();
    assert_eq!(err.kind(), "parse");
}
