#pragma once

#include <string>
#include <vector>

namespace rankaudit {

struct ChatMessage {
  std::string role;
  std::string content;

  bool operator==(const ChatMessage&) const = default;
};

// One prompt from a corpus. Records carrying a single text field are stored
// as one user message.
struct PromptRecord {
  std::string id;
  std::vector<ChatMessage> messages;
  std::string source;

  // Content of the first user turn, or of the first message when no turn is
  // tagged "user".
  const std::string& text() const;

  bool operator==(const PromptRecord&) const = default;
};

}  // namespace rankaudit
