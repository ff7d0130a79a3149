#pragma once

#include "occlip/scenegraph.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace occlip {

/// Pluggable prompt -> completion transport for the external parser.
class LlmTransport {
public:
    virtual ~LlmTransport() = default;
    virtual std::string complete(const std::string& prompt) = 0;
};

/// Canned responses keyed by caption (the text after the final
/// "Caption: "), with an optional fallback; records every prompt seen.
class MockTransport : public LlmTransport {
public:
    MockTransport() = default;
    explicit MockTransport(std::map<std::string, std::string> by_caption) : responses_(std::move(by_caption)) {}
    explicit MockTransport(std::function<std::string(const std::string& caption)> fn) : fallback_(std::move(fn)) {}

    std::string complete(const std::string& prompt) override;

    const std::vector<std::string>& prompts() const { return prompts_; }

    /// Caption embedded at the end of a prompt built by build_llm_prompt.
    static std::string caption_of_prompt(const std::string& prompt);

private:
    std::map<std::string, std::string> responses_;
    std::function<std::string(const std::string&)> fallback_;
    std::vector<std::string> prompts_;
};

struct LlmEndpoint {
    std::string base_url;               // e.g. http://localhost:8000
    std::string path = "/v1/completions";
    std::string model = "llama-3-70b-instruct";
    int timeout_seconds = 60;

    /// OCCLIP_LLM_ENDPOINT overrides base_url when set.
    static LlmEndpoint from_env();
    static LlmEndpoint from_env(LlmEndpoint defaults);
};

/// Plain-HTTP JSON client. Sends {"model", "prompt"} and accepts either
/// {"choices":[{"text"}]}, {"choices":[{"message":{"content"}}]} or
/// {"response"} bodies. Throws Error(Io) on transport failure.
class HttpTransport : public LlmTransport {
public:
    explicit HttpTransport(LlmEndpoint endpoint) : endpoint_(std::move(endpoint)) {}
    std::string complete(const std::string& prompt) override;

private:
    LlmEndpoint endpoint_;
};

/// build_llm_prompt -> transport -> extract_graph_from_llm_response.
ParseResult parse_with_llm(const std::string& caption, LlmTransport& transport);

}  // namespace occlip
