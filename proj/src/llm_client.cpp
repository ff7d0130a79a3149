#include "occlip/llm_client.hpp"

#include "occlip/errors.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <cstdlib>

namespace occlip {

std::string MockTransport::caption_of_prompt(const std::string& prompt)
{
    constexpr std::string_view marker = "Caption: ";
    const auto pos = prompt.rfind(marker);
    return pos == std::string::npos ? prompt : prompt.substr(pos + marker.size());
}

std::string MockTransport::complete(const std::string& prompt)
{
    prompts_.push_back(prompt);
    const auto caption = caption_of_prompt(prompt);
    if (auto it = responses_.find(caption); it != responses_.end()) return it->second;
    if (fallback_) return fallback_(caption);
    return {};
}

LlmEndpoint LlmEndpoint::from_env()
{
    return from_env(LlmEndpoint{});
}

LlmEndpoint LlmEndpoint::from_env(LlmEndpoint defaults)
{
    if (const char* env = std::getenv("OCCLIP_LLM_ENDPOINT"); env && *env) defaults.base_url = env;
    return defaults;
}

std::string HttpTransport::complete(const std::string& prompt)
{
    if (endpoint_.base_url.empty()) throw Error(ErrorCode::Io, "LLM endpoint not configured");
    httplib::Client client(endpoint_.base_url);
    client.set_read_timeout(endpoint_.timeout_seconds, 0);
    const nlohmann::json body = {{"model", endpoint_.model}, {"prompt", prompt}};
    auto res = client.Post(endpoint_.path, body.dump(), "application/json");
    if (!res) throw Error(ErrorCode::Io, "LLM request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw Error(ErrorCode::Io, "LLM endpoint returned HTTP " + std::to_string(res->status));
    auto j = nlohmann::json::parse(res->body, nullptr, false);
    if (j.is_discarded()) return res->body;
    if (j.contains("choices") && j["choices"].is_array() && !j["choices"].empty()) {
        const auto& c = j["choices"][0];
        if (c.contains("text") && c["text"].is_string()) return c["text"].get<std::string>();
        if (c.contains("message") && c["message"].contains("content")) return c["message"]["content"].get<std::string>();
    }
    if (j.contains("response") && j["response"].is_string()) return j["response"].get<std::string>();
    return res->body;
}

ParseResult parse_with_llm(const std::string& caption, LlmTransport& transport)
{
    return extract_graph_from_llm_response(transport.complete(build_llm_prompt(caption)));
}

}  // namespace occlip
