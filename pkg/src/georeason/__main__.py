from georeason.cli import main

main()
