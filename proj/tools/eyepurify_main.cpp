// Placeholder entry point; the CLI is wired up once the command layer lands.
int main() { return 1; }
