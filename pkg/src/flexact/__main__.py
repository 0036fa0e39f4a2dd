from flexact.cli import main

main()
