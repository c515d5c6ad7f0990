// Placeholder main; the real CLI lands with the io/verify modules.
int main() { return 0; }
