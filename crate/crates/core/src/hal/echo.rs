use super::{Backend, BackendRequest, BackendResponse, HalError};

/// Returns the rendered input unchanged and reports no token use.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoBackend;

impl Backend for EchoBackend {
    fn invoke(&self, request: &BackendRequest) -> Result<BackendResponse, HalError> {
        Ok(BackendResponse::new(request.rendered_input.clone()))
    }
}
