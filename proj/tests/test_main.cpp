#define DOCTEST_CONFIG_IMPLEMENT
#include "testing.hpp"
#include "recdet/common.hpp"

int main(int argc, char** argv) {
    recdet::set_log_level(recdet::LogLevel::warn);
    torch::set_num_threads(1);
    doctest::Context context;
    context.applyCommandLine(argc, argv);
    return context.run();
}
